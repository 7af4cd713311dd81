//! Rotation-invariant lattice parameterization.
//!
//! A lattice matrix `L` (columns are lattice vectors) factors as `L = R exp(S)`
//! with `R` a proper rotation and `S` symmetric. `S` is additive under isotropic
//! scaling and blind to left rotations of the lattice, so its six independent
//! entries make a well-conditioned regression target.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio below which the smallest singular value counts as zero.
const SINGULAR_RATIO: f64 = 1e-12;

/// Lattice matrix in Å per fractional unit, lattice vectors as columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeMatrix(pub Matrix3<f64>);

impl LatticeMatrix {
    pub fn new(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn from_row_major(v: [f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(&v))
    }

    pub fn det(&self) -> f64 {
        self.0.determinant()
    }
}

/// Symmetric matrix logarithm of the polar factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeLog {
    s: Matrix3<f64>,
}

impl LatticeLog {
    /// Builds from a matrix, symmetrizing it so that only six entries are stored.
    pub fn from_matrix(s: &Matrix3<f64>) -> Self {
        Self::from_coeffs(&[
            s[(0, 0)],
            s[(1, 1)],
            s[(2, 2)],
            0.5 * (s[(0, 1)] + s[(1, 0)]),
            0.5 * (s[(0, 2)] + s[(2, 0)]),
            0.5 * (s[(1, 2)] + s[(2, 1)]),
        ])
    }

    /// Packing order is `(s11, s22, s33, s12, s13, s23)`.
    pub fn from_coeffs(c: &[f64; 6]) -> Self {
        let s = Matrix3::new(c[0], c[3], c[4], c[3], c[1], c[5], c[4], c[5], c[2]);
        Self { s }
    }

    pub fn coeffs(&self) -> [f64; 6] {
        let s = &self.s;
        [s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(0, 1)], s[(0, 2)], s[(1, 2)]]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.s
    }
}

/// Polar decomposition `m = r p` with `r` a proper rotation and `p` SPD.
pub fn polar_decompose(m: &LatticeMatrix) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let (u, sigma, v) = checked_svd(m)?;
    let r = u * v.transpose();
    let p = v * Matrix3::from_diagonal(&sigma) * v.transpose();
    Ok((r, symmetrize(&p)))
}

pub fn lattice_to_log(m: &LatticeMatrix) -> Result<LatticeLog> {
    let (_, sigma, v) = checked_svd(m)?;
    let log_sigma = sigma.map(f64::ln);
    let s = v * Matrix3::from_diagonal(&log_sigma) * v.transpose();
    Ok(LatticeLog::from_matrix(&s))
}

/// Canonical inverse with `R = I`: returns `exp(s)`.
pub fn log_to_lattice(s: &LatticeLog) -> LatticeMatrix {
    let eig = SymmetricEigen::new(*s.matrix());
    let exp_vals = eig.eigenvalues.map(f64::exp);
    let q = eig.eigenvectors;
    LatticeMatrix(symmetrize(&(q * Matrix3::from_diagonal(&exp_vals) * q.transpose())))
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// SVD with singular values checked; `u` and `v` are returned with
/// `det(u v^T) = +1`, which holds automatically for `det(m) > 0`.
fn checked_svd(
    m: &LatticeMatrix,
) -> Result<(Matrix3<f64>, nalgebra::Vector3<f64>, Matrix3<f64>)> {
    let mat = m.0;
    if !mat.iter().all(|x| x.is_finite()) {
        return Err(Error::SingularLattice { ratio: f64::NAN });
    }
    let svd = mat.svd(true, true);
    let sigma = svd.singular_values;
    let max = sigma.max();
    let min = sigma.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio >= SINGULAR_RATIO) || mat.determinant() <= 0.0 {
        return Err(Error::SingularLattice { ratio });
    }
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    Ok((u, sigma, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn identity_and_isotropic_scale() {
        let (r, p) = polar_decompose(&LatticeMatrix::identity()).unwrap();
        assert!(close(&r, &Matrix3::identity(), 1e-14));
        assert!(close(&p, &Matrix3::identity(), 1e-14));

        let (r, p) = polar_decompose(&LatticeMatrix(Matrix3::identity() * 2.0)).unwrap();
        assert!(close(&r, &Matrix3::identity(), 1e-14));
        assert!(close(&p, &(Matrix3::identity() * 2.0), 1e-14));

        let s = lattice_to_log(&LatticeMatrix::identity()).unwrap();
        assert!(s.coeffs().iter().all(|c| c.abs() < 1e-15));

        let c: f64 = 3.7;
        let s = lattice_to_log(&LatticeMatrix(Matrix3::identity() * c)).unwrap();
        assert!(close(s.matrix(), &(Matrix3::identity() * c.ln()), 1e-14));
    }

    #[test]
    fn log_to_lattice_simple_cases() {
        let zero = LatticeLog::from_coeffs(&[0.0; 6]);
        assert!(close(&log_to_lattice(&zero).0, &Matrix3::identity(), 1e-15));
        let l3 = 3f64.ln();
        let s = LatticeLog::from_coeffs(&[l3, l3, l3, 0.0, 0.0, 0.0]);
        assert!(close(&log_to_lattice(&s).0, &(Matrix3::identity() * 3.0), 1e-14));
    }

    #[test]
    fn singular_and_left_handed_rejected() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = 0.0;
        assert!(matches!(
            polar_decompose(&LatticeMatrix(m)),
            Err(Error::SingularLattice { .. })
        ));
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(lattice_to_log(&LatticeMatrix(m)).is_err());
    }

    #[test]
    fn coefficient_packing_order() {
        let s = LatticeLog::from_coeffs(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = s.matrix();
        assert_eq!(m[(0, 1)], 4.0);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(m[(0, 2)], 5.0);
        assert_eq!(m[(1, 2)], 6.0);
        assert_eq!(s.coeffs(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn rotation_invariance_fixed_case() {
        let m = LatticeMatrix(Matrix3::new(4.1, 0.3, -0.7, 0.0, 3.2, 0.5, 0.2, 0.0, 5.6));
        let q = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.83).into_inner();
        let a = lattice_to_log(&m).unwrap();
        let b = lattice_to_log(&LatticeMatrix(q * m.0)).unwrap();
        assert!(close(a.matrix(), b.matrix(), 1e-12));
    }
}
