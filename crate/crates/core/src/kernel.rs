//! The width-clamped winding-number kernel and its Jacobians.
//!
//! In `D` dimensions the kernel is the gradient of the Laplace fundamental
//! solution,
//!
//! ```text
//! K(x, y) = -(x - y) / (S_D * |x - y|^D),   S_2 = 2*pi,  S_3 = 4*pi,
//! ```
//!
//! and the modified kernel replaces `|x - y|` in the denominator by the width
//! `w` whenever `|x - y| < w`. The modified kernel is continuous, vanishes at
//! `x = y`, and depends on `x - y` only, so the Jacobian with respect to `x`
//! is the negative of the Jacobian with respect to `y`.
//!
//! The hot loops use the const-generic functions; the slice functions
//! dispatch on the runtime dimension.

use std::f64::consts::PI;

/// Which kernel argument a Jacobian is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    First,
    Second,
}

/// Surface measure of the unit sphere in `D` dimensions (2 pi or 4 pi).
#[inline]
pub const fn sphere_measure(dim: usize) -> f64 {
    if dim == 2 {
        2.0 * PI
    } else {
        4.0 * PI
    }
}

#[inline]
fn powi_dim<const D: usize>(r: f64) -> f64 {
    if D == 2 {
        r * r
    } else {
        r * r * r
    }
}

#[inline]
fn diff_and_norm<const D: usize>(x: &[f64; D], y: &[f64; D]) -> ([f64; D], f64) {
    let mut d = [0.0; D];
    let mut r2 = 0.0;
    for k in 0..D {
        d[k] = x[k] - y[k];
        r2 += d[k] * d[k];
    }
    (d, r2.sqrt())
}

/// Modified kernel `K~(x, y)` for width `w > 0`.
#[inline]
pub fn kernel_mod<const D: usize>(x: &[f64; D], y: &[f64; D], w: f64) -> [f64; D] {
    let (d, r) = diff_and_norm(x, y);
    let rho = if r >= w { r } else { w };
    let s = -1.0 / (sphere_measure(D) * powi_dim::<D>(rho));
    d.map(|v| s * v)
}

/// Jacobian of [`kernel_mod`]; entry `[k][l]` is `dK~_k / d(arg)_l`.
///
/// At `|x - y| = w` the far-branch formula is returned.
#[inline]
pub fn kernel_mod_jacobian<const D: usize>(
    x: &[f64; D],
    y: &[f64; D],
    w: f64,
    wrt: Wrt,
) -> [[f64; D]; D] {
    let (_, jac) = kernel_and_jacobian_second(x, y, w);
    match wrt {
        Wrt::Second => jac,
        Wrt::First => jac.map(|row| row.map(|v| -v)),
    }
}

/// Kernel value together with its Jacobian with respect to the second
/// argument. The Jacobian is symmetric.
#[inline]
pub fn kernel_and_jacobian_second<const D: usize>(
    x: &[f64; D],
    y: &[f64; D],
    w: f64,
) -> ([f64; D], [[f64; D]; D]) {
    let (d, r) = diff_and_norm(x, y);
    let c = 1.0 / sphere_measure(D);
    let mut jac = [[0.0; D]; D];
    if r >= w {
        let inv = 1.0 / powi_dim::<D>(r);
        let inv2 = D as f64 * inv / (r * r);
        for k in 0..D {
            for l in 0..D {
                jac[k][l] = c * (-inv2 * d[k] * d[l]);
            }
            jac[k][k] += c * inv;
        }
        (d.map(|v| -c * inv * v), jac)
    } else {
        let inv = 1.0 / powi_dim::<D>(w);
        for (k, row) in jac.iter_mut().enumerate() {
            row[k] = c * inv;
        }
        (d.map(|v| -c * inv * v), jac)
    }
}

#[inline]
pub(crate) fn as_array<const D: usize>(p: &[f64]) -> &[f64; D] {
    p.try_into().expect("point dimension")
}

/// Runtime-dimension form of [`kernel_mod`].
pub fn kernel_mod_slice(x: &[f64], y: &[f64], w: f64) -> Vec<f64> {
    assert_eq!(x.len(), y.len(), "kernel arguments differ in dimension");
    match x.len() {
        2 => kernel_mod::<2>(as_array(x), as_array(y), w).to_vec(),
        3 => kernel_mod::<3>(as_array(x), as_array(y), w).to_vec(),
        d => panic!("unsupported dimension {d}"),
    }
}

/// Runtime-dimension form of [`kernel_mod_jacobian`], row-major `dim x dim`.
pub fn kernel_mod_jacobian_slice(x: &[f64], y: &[f64], w: f64, wrt: Wrt) -> Vec<f64> {
    assert_eq!(x.len(), y.len(), "kernel arguments differ in dimension");
    match x.len() {
        2 => kernel_mod_jacobian::<2>(as_array(x), as_array(y), w, wrt)
            .iter()
            .flatten()
            .copied()
            .collect(),
        3 => kernel_mod_jacobian::<3>(as_array(x), as_array(y), w, wrt)
            .iter()
            .flatten()
            .copied()
            .collect(),
        d => panic!("unsupported dimension {d}"),
    }
}
