//! Gradient of the winding clearness error with respect to the points.
//!
//! `W(P) = min_mu f(P, mu)` and `f` is quadratic in `mu`, so at the solved
//! surfels `df/dmu = 0` and `dW/dP` is the partial derivative of `f` with
//! `mu` held fixed. That partial flows through every matrix entry:
//!
//! ```text
//! df/d[A1]_{j,m} = 2/N   (r1_j mu_m + alpha mu_m^2 [A1]_{j,m})
//! df/d[A2]_{j,m} = eta/N (r2_j mu_m + alpha mu_m^2 [A2]_{j,m})
//! ```
//!
//! with `r1 = A1 mu - b` and `r2 = A2 mu`, the `alpha` parts coming from the
//! diagonal regularizer. Each `d`-block of entries is one kernel evaluation
//! `K~(x, p_i)`, whose Jacobian carries the entry gradient to `p_i` (second
//! argument) and, for on-surface rows, to `p_j` (first argument, opposite
//! sign). Box samples are constants.
//!
//! Accumulation is gather-only (each output is summed serially in a fixed
//! order), so the result does not depend on the number of threads.

use rayon::prelude::*;

use crate::cloud::{BoxSamples, PointCloud};
use crate::config::WindingConfig;
use crate::error::{Error, Result};
use crate::kernel::{as_array, kernel_and_jacobian_second};
use crate::system::{
    assemble, evaluate_objective, residuals, solve_surfels, winding_clearness, AssembledSystem,
    SolveMethod, Surfels, WceReport,
};

/// Pairs with `| |x - y| - w | <= BRANCH_BAND` are reported: the kernel is
/// only continuous there and the gradient is the far-branch one-sided value.
pub const BRANCH_BAND: f64 = 1e-6;

/// Per-point gradient vectors, same layout as [`PointCloud::coords`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    dim: usize,
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len() % dim, 0);
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of the per-point vectors.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for g in self.values.chunks_exact(self.dim) {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        out
    }

    /// `|self - other| / |other|`.
    pub fn relative_error(&self, other: &Gradient) -> f64 {
        let diff = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.norm()
    }
}

/// `dW/dP` together with the quantities computed on the way.
#[derive(Clone, Debug)]
pub struct WceGradient {
    pub gradient: Gradient,
    pub report: WceReport,
    pub surfels: Surfels,
    /// Number of point pairs within [`BRANCH_BAND`] of the kernel switch.
    pub near_branch_pairs: usize,
}

impl WceGradient {
    pub fn near_branch(&self) -> bool {
        self.near_branch_pairs > 0
    }
}

struct EntryWeights<'a> {
    mu: &'a [f64],
    on_surface: &'a [f64],
    on_box: &'a [f64],
    inv_n: f64,
    alpha: f64,
    eta: f64,
    width: f64,
}

impl EntryWeights<'_> {
    /// Entry gradient for a block `K~(x, p_i)` with row residual `res` and
    /// row weight `scale` (2 for on-surface rows, eta for box rows).
    #[inline]
    fn block<const D: usize>(&self, i: usize, res: f64, k: &[f64; D], scale: f64) -> [f64; D] {
        let mu = &self.mu[i * D..(i + 1) * D];
        std::array::from_fn(|c| scale * self.inv_n * (res * mu[c] + self.alpha * mu[c] * mu[c] * k[c]))
    }
}

#[inline]
fn apply<const D: usize>(jac: &[[f64; D]; D], g: &[f64; D], acc: &mut [f64; D], sign: f64) {
    for l in 0..D {
        let mut s = 0.0;
        for k in 0..D {
            s += jac[k][l] * g[k];
        }
        acc[l] += sign * s;
    }
}

fn accumulate<const D: usize>(
    cloud: &[f64],
    boxq: &[f64],
    w: &EntryWeights<'_>,
) -> (Vec<f64>, usize) {
    let n = cloud.len() / D;
    let pts: Vec<&[f64; D]> = cloud.chunks_exact(D).map(as_array::<D>).collect();
    let qs: Vec<&[f64; D]> = boxq.chunks_exact(D).map(as_array::<D>).collect();
    let near = |x: &[f64; D], y: &[f64; D]| {
        let r = (0..D).map(|c| (x[c] - y[c]).powi(2)).sum::<f64>().sqrt();
        (r - w.width).abs() <= crate::grad::BRANCH_BAND
    };

    // p_i as the second kernel argument: on-surface rows j and box rows.
    let second: Vec<([f64; D], usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0; D];
            let mut flagged = 0;
            for (j, x) in pts.iter().enumerate() {
                if j == i {
                    continue;
                }
                let (k, jac) = kernel_and_jacobian_second::<D>(x, pts[i], w.width);
                let g = w.block(i, w.on_surface[j], &k, 2.0);
                apply(&jac, &g, &mut acc, 1.0);
                flagged += usize::from(near(x, pts[i]));
            }
            if w.eta != 0.0 {
                for (j, q) in qs.iter().enumerate() {
                    let (k, jac) = kernel_and_jacobian_second::<D>(q, pts[i], w.width);
                    let g = w.block(i, w.on_box[j], &k, w.eta);
                    apply(&jac, &g, &mut acc, 1.0);
                    flagged += usize::from(near(q, pts[i]));
                }
            }
            (acc, flagged)
        })
        .collect();

    // p_j as the first kernel argument of on-surface row j.
    let first: Vec<[f64; D]> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut acc = [0.0; D];
            for (i, p) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let (k, jac) = kernel_and_jacobian_second::<D>(pts[j], p, w.width);
                let g = w.block(i, w.on_surface[j], &k, 2.0);
                apply(&jac, &g, &mut acc, -1.0);
            }
            acc
        })
        .collect();

    let mut out = Vec::with_capacity(n * D);
    let mut flagged = 0;
    for ((a, f), b) in second.iter().zip(&first) {
        flagged += f;
        out.extend((0..D).map(|c| a[c] + b[c]));
    }
    (out, flagged)
}

/// Gradient at already-solved surfels of an assembled system.
pub fn gradient_at(
    cloud: &PointCloud,
    boxq: &BoxSamples,
    sys: &AssembledSystem,
    surfels: &Surfels,
    cfg: &WindingConfig,
) -> (Gradient, usize) {
    let res = residuals(sys, surfels.as_slice());
    let weights = EntryWeights {
        mu: surfels.as_slice(),
        on_surface: &res.on_surface,
        on_box: &res.on_box,
        inv_n: 1.0 / cloud.len() as f64,
        alpha: cfg.alpha,
        eta: cfg.eta,
        width: cfg.width,
    };
    let (values, flagged) = match cloud.dim() {
        2 => accumulate::<2>(cloud.coords(), boxq.coords(), &weights),
        _ => accumulate::<3>(cloud.coords(), boxq.coords(), &weights),
    };
    (Gradient::new(cloud.dim(), values), flagged)
}

/// `W(P)` and `dW/dP` from one assembly and one solve.
///
/// Fails with [`Error::NotPositiveDefinite`] when the Cholesky factorization
/// does not succeed, since the minimizer is then not certified unique.
pub fn grad_wce(cloud: &PointCloud, boxq: &BoxSamples, cfg: &WindingConfig) -> Result<WceGradient> {
    let sys = assemble(cloud, boxq, cfg)?;
    let surfels = solve_surfels(&sys)?;
    if surfels.method != SolveMethod::Cholesky {
        return Err(Error::NotPositiveDefinite);
    }
    let report = evaluate_objective(&sys, surfels.as_slice());
    let (gradient, near_branch_pairs) = gradient_at(cloud, boxq, &sys, &surfels, cfg);
    if near_branch_pairs > 0 {
        log::warn!("{near_branch_pairs} point pairs at the kernel width; gradient is one-sided");
    }
    Ok(WceGradient {
        gradient,
        report,
        surfels,
        near_branch_pairs,
    })
}

/// Penalized denoising loss `W(P) + lambda/N |P - P0|^2` and its gradient.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub gradient: Gradient,
    pub loss: f64,
    /// `lambda/N |P - P0|^2`
    pub penalty: f64,
    pub wce: WceGradient,
}

pub fn grad_loss(
    cloud: &PointCloud,
    reference: &PointCloud,
    boxq: &BoxSamples,
    cfg: &WindingConfig,
    lambda: f64,
) -> Result<LossGradient> {
    if reference.dim() != cloud.dim() {
        return Err(Error::DimMismatch {
            expected: cloud.dim(),
            found: reference.dim(),
        });
    }
    if reference.len() != cloud.len() {
        return Err(Error::ShapeMismatch {
            expected: cloud.len(),
            found: reference.len(),
        });
    }
    let wce = grad_wce(cloud, boxq, cfg)?;
    let n = cloud.len() as f64;
    let mut penalty = 0.0;
    let values = wce
        .gradient
        .as_slice()
        .iter()
        .zip(cloud.coords().iter().zip(reference.coords()))
        .map(|(g, (p, p0))| {
            let diff = p - p0;
            penalty += diff * diff;
            g + 2.0 * lambda / n * diff
        })
        .collect();
    let penalty = lambda / n * penalty;
    Ok(LossGradient {
        gradient: Gradient::new(cloud.dim(), values),
        loss: wce.report.total + penalty,
        penalty,
        wce,
    })
}

/// Central finite differences of `W(P)`, re-solving the system for every
/// perturbed cloud. `2 * d * N` solves; meant for small clouds.
pub fn fd_gradient(
    cloud: &PointCloud,
    boxq: &BoxSamples,
    cfg: &WindingConfig,
    step: f64,
) -> Result<Gradient> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be > 0, got {step}")));
    }
    let mut coords = cloud.coords().to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for c in 0..coords.len() {
        let orig = coords[c];
        coords[c] = orig + step;
        let plus = winding_clearness(&cloud.with_coords(coords.clone())?, boxq, cfg)?.0.total;
        coords[c] = orig - step;
        let minus = winding_clearness(&cloud.with_coords(coords.clone())?, boxq, cfg)?.0.total;
        coords[c] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(Gradient::new(cloud.dim(), out))
}
