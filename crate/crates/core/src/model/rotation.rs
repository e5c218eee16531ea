//! Continuous 6D rotation parameterization.
//!
//! Two 3-vectors `a1`, `a2` are orthonormalized by Gram–Schmidt into the first
//! two columns of the matrix; the third column is their cross product.

use candle_core::{Tensor, D};
use nalgebra::Matrix3;

use crate::error::{invalid, Result};
use crate::mesh::{Rotation, Vec3};

const EPS: f64 = 1e-12;

/// Below this ratio of `|a2 − (b1·a2) b1|` to `|a2|` the pair is treated as parallel.
pub const PARALLEL_TOLERANCE: f64 = 1e-6;

pub struct Rot6dOutput {
    pub rotation: Rotation,
    /// Set when the input vectors were (nearly) parallel or zero and an
    /// arbitrary orthogonal direction was substituted.
    pub degenerate: bool,
}

fn any_orthogonal(b1: &Vec3) -> Vec3 {
    let axis = if b1.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    (axis - b1 * b1.dot(&axis)).normalize()
}

pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Rot6dOutput> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("6D rotation has non-finite entries"));
    }
    let a1 = Vec3::new(r[0], r[1], r[2]);
    let a2 = Vec3::new(r[3], r[4], r[5]);
    let mut degenerate = false;
    let b1 = if a1.norm() > EPS {
        a1 / a1.norm()
    } else {
        degenerate = true;
        Vec3::x()
    };
    let rest = a2 - b1 * b1.dot(&a2);
    let b2 = if rest.norm() > PARALLEL_TOLERANCE * a2.norm().max(EPS) && rest.norm() > EPS {
        rest / rest.norm()
    } else {
        degenerate = true;
        any_orthogonal(&b1)
    };
    let b3 = b1.cross(&b2);
    let m = Matrix3::from_columns(&[b1, b2, b3]);
    Ok(Rot6dOutput {
        rotation: Rotation::new_unchecked(m),
        degenerate,
    })
}

/// The 6D parameters of a rotation: its first two columns.
pub fn matrix_to_rot6d(r: &Rotation) -> [f64; 6] {
    let m = r.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Re-orthonormalizes a nearly orthonormal row-major matrix from its first
/// two columns.
pub fn rotation_from_row_major_approx(values: &[f64]) -> Result<Rotation> {
    if values.len() != 9 {
        return Err(invalid!("rotation needs 9 values, got {}", values.len()));
    }
    let r = [values[0], values[3], values[6], values[1], values[4], values[7]];
    Ok(rot6d_to_matrix(&r)?.rotation)
}

fn normalize(v: &Tensor) -> Result<Tensor> {
    let norm = (v.sqr()?.sum_keepdim(D::Minus1)? + EPS)?.sqrt()?;
    Ok(v.broadcast_div(&norm)?)
}

fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let x = (c(a, 1)?.mul(&c(b, 2)?)? - c(a, 2)?.mul(&c(b, 1)?)?)?;
    let y = (c(a, 2)?.mul(&c(b, 0)?)? - c(a, 0)?.mul(&c(b, 2)?)?)?;
    let z = (c(a, 0)?.mul(&c(b, 1)?)? - c(a, 1)?.mul(&c(b, 0)?)?)?;
    Ok(Tensor::cat(&[x, y, z], D::Minus1)?)
}

/// Batched, differentiable version: `(B, 6)` → `(B, 3, 3)`.
pub fn rot6d_to_matrix_tensor(r: &Tensor) -> Result<Tensor> {
    let (_, six) = r.dims2()?;
    if six != 6 {
        return Err(invalid!("6D rotations need shape (B, 6), got {:?}", r.dims()));
    }
    let b1 = normalize(&r.narrow(1, 0, 3)?)?;
    let a2 = r.narrow(1, 3, 3)?;
    let proj = b1.broadcast_mul(&(&b1 * &a2)?.sum_keepdim(1)?)?;
    let b2 = normalize(&(a2 - proj)?)?;
    let b3 = cross(&b1, &b2)?;
    Ok(Tensor::stack(&[b1, b2, b3], 2)?)
}
