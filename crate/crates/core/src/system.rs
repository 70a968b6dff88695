//! The winding linear system and the winding clearness error.
//!
//! For a cloud `P` of `N` points and fixed box samples `Q` (`M` points), the
//! unknown surfels `mu` (length `d*N`) minimize
//!
//! ```text
//! f(P, mu) = 1/N * ( |A1 mu - b|^2 + eta/2 |A2 mu|^2 + alpha mu^T R mu ),
//! [A1]_{j, d*i+k} = K~(p_j, p_i)_k,   [A2]_{j, d*i+k} = K~(q_j, p_i)_k,
//! R = diag(A1^T A1 + eta/2 A2^T A2),  b = 1/2.
//! ```
//!
//! The minimizer solves `A~ mu = b~` with `A~ = A1^T A1 + eta/2 A2^T A2 +
//! alpha R` and `b~ = A1^T b`, and the minimum value is the winding clearness
//! error `W(P) = 1/N (b^T b - b^T A1 mu)`.

use faer::linalg::matmul::triangular::{matmul as tri_matmul, BlockStructure};
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, Par, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{sample_bounding_box, BoxSamples, PointCloud};
use crate::config::WindingConfig;
use crate::error::{Error, Result};
use crate::kernel::{as_array, kernel_mod};
use crate::rng::RngStream;

/// Target value of the field at the sample points.
pub const ON_SURFACE_VALUE: f64 = 0.5;

/// Relative residual accepted from the linear solve.
pub const SOLVE_TOLERANCE: f64 = 1e-8;

const RESIDUAL_FLOOR: f64 = 1e-30;
const MAX_REFINEMENT_STEPS: usize = 3;

pub(crate) fn faer_par() -> Par {
    match rayon::current_num_threads() {
        0 | 1 => Par::Seq,
        n => Par::rayon(n),
    }
}

/// Caps the worker threads used for assembly, solves, gradients and metrics.
/// Must be called before any parallel work; the pool can be set only once.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter("thread count must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    faer::set_global_parallelism(if n == 1 { Par::Seq } else { Par::rayon(n) });
    Ok(())
}

/// Samples the box constraints for `cloud` using the seed and sizes in `cfg`.
pub fn sample_box_for(cloud: &PointCloud, cfg: &WindingConfig) -> Result<BoxSamples> {
    let count = cfg.box_count(cloud.len()).max(2 * cloud.dim());
    sample_bounding_box(
        cloud.dim(),
        cfg.box_half_extent,
        count,
        &mut RngStream::new(cfg.seed),
    )
}

/// Dense matrices of the winding system for one cloud.
#[derive(Clone, Debug)]
pub struct AssembledSystem {
    dim: usize,
    alpha: f64,
    eta: f64,
    a1: Mat<f64>,
    a2: Mat<f64>,
    rdiag: Vec<f64>,
    atilde: Mat<f64>,
    btilde: Vec<f64>,
}

fn fill_kernel_columns<const D: usize>(
    target: &mut Mat<f64>,
    rows: &[f64],
    cloud: &[f64],
    width: f64,
) -> Result<()> {
    target
        .par_col_chunks_mut(D)
        .enumerate()
        .try_for_each(|(i, mut block)| {
            let p = as_array::<D>(&cloud[i * D..(i + 1) * D]);
            for (j, x) in rows.chunks_exact(D).enumerate() {
                let k = kernel_mod::<D>(as_array(x), p, width);
                if k.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteKernel { row: j, point: i });
                }
                for (c, v) in k.into_iter().enumerate() {
                    block[(j, c)] = v;
                }
            }
            Ok(())
        })
}

fn column_sq_norms(a: &Mat<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|c| a.col(c).iter().map(|v| v * v).sum())
        .collect()
}

/// Builds `A1`, `A2`, `R`, `A~` and `b~`.
pub fn assemble(cloud: &PointCloud, boxq: &BoxSamples, cfg: &WindingConfig) -> Result<AssembledSystem> {
    cfg.validate()?;
    if boxq.is_empty() {
        return Err(Error::InvalidParameter("no box samples".into()));
    }
    boxq.check_encloses(cloud)?;
    let d = cloud.dim();
    let n = cloud.len();
    let m = boxq.len();
    let mut a1 = Mat::<f64>::zeros(n, d * n);
    let mut a2 = Mat::<f64>::zeros(m, d * n);
    match d {
        2 => {
            fill_kernel_columns::<2>(&mut a1, cloud.coords(), cloud.coords(), cfg.width)?;
            fill_kernel_columns::<2>(&mut a2, boxq.coords(), cloud.coords(), cfg.width)?;
        }
        _ => {
            fill_kernel_columns::<3>(&mut a1, cloud.coords(), cloud.coords(), cfg.width)?;
            fill_kernel_columns::<3>(&mut a2, boxq.coords(), cloud.coords(), cfg.width)?;
        }
    }

    let half_eta = 0.5 * cfg.eta;
    let rdiag: Vec<f64> = column_sq_norms(&a1)
        .into_iter()
        .zip(column_sq_norms(&a2))
        .map(|(s1, s2)| s1 + half_eta * s2)
        .collect();

    // Lower triangle of A1^T A1 + eta/2 A2^T A2, then mirrored.
    let dn = d * n;
    let par = faer_par();
    let mut atilde = Mat::<f64>::zeros(dn, dn);
    tri_matmul(
        atilde.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        a1.transpose(),
        BlockStructure::Rectangular,
        a1.as_ref(),
        BlockStructure::Rectangular,
        1.0,
        par,
    );
    if half_eta != 0.0 {
        tri_matmul(
            atilde.as_mut(),
            BlockStructure::TriangularLower,
            Accum::Add,
            a2.transpose(),
            BlockStructure::Rectangular,
            a2.as_ref(),
            BlockStructure::Rectangular,
            half_eta,
            par,
        );
    }
    for c in 0..dn {
        atilde[(c, c)] += cfg.alpha * rdiag[c];
        for r in c + 1..dn {
            atilde[(c, r)] = atilde[(r, c)];
        }
    }

    let btilde: Vec<f64> = (0..dn)
        .map(|c| ON_SURFACE_VALUE * a1.col(c).iter().sum::<f64>())
        .collect();

    Ok(AssembledSystem {
        dim: d,
        alpha: cfg.alpha,
        eta: cfg.eta,
        a1,
        a2,
        rdiag,
        atilde,
        btilde,
    })
}

impl AssembledSystem {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_points(&self) -> usize {
        self.a1.nrows()
    }

    pub fn n_box(&self) -> usize {
        self.a2.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `N x dN` on-surface constraint matrix.
    pub fn a1(&self) -> &Mat<f64> {
        &self.a1
    }

    /// `M x dN` box constraint matrix.
    pub fn a2(&self) -> &Mat<f64> {
        &self.a2
    }

    pub fn rdiag(&self) -> &[f64] {
        &self.rdiag
    }

    /// Symmetric `dN x dN` normal matrix (both triangles stored).
    pub fn atilde(&self) -> &Mat<f64> {
        &self.atilde
    }

    pub fn btilde(&self) -> &[f64] {
        &self.btilde
    }

    fn atilde_times(&self, x: &[f64]) -> Vec<f64> {
        let dn = x.len();
        let mut out = vec![0.0; dn];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.atilde.col(c).iter()) {
                *o += a * xc;
            }
        }
        out
    }

    /// `||A~ x - b~|| / max(||b~||, 1e-30)`.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.atilde_times(x);
        let res = ax
            .iter()
            .zip(&self.btilde)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        res / norm(&self.btilde).max(RESIDUAL_FLOOR)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matvec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(a.col(c).iter()) {
            *o += v * xc;
        }
    }
    out
}

/// Factorization used for the surfel solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMethod {
    Cholesky,
    Lu,
}

/// Surfel vector `mu`, one `dim`-vector `a_i n_i` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfels {
    dim: usize,
    mu: Vec<f64>,
    pub method: SolveMethod,
    pub relative_residual: f64,
    pub condition_estimate: f64,
}

impl Surfels {
    pub fn new(dim: usize, mu: Vec<f64>) -> Self {
        Self {
            dim,
            mu,
            method: SolveMethod::Cholesky,
            relative_residual: 0.0,
            condition_estimate: f64::NAN,
        }
    }

    /// All-zero surfels for `n` points.
    pub fn zeros(dim: usize, n: usize) -> Self {
        Self::new(dim, vec![0.0; dim * n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.mu.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    pub fn surfel(&self, i: usize) -> &[f64] {
        &self.mu[i * self.dim..(i + 1) * self.dim]
    }

    /// Surfel directions as unit normals; `None` entries for zero surfels.
    pub fn unit_normals(&self) -> Vec<Option<Vec<f64>>> {
        self.mu
            .chunks_exact(self.dim)
            .map(|s| {
                let len = norm(s);
                (len > 0.0).then(|| s.iter().map(|v| v / len).collect())
            })
            .collect()
    }
}

/// Solves `A~ mu = b~` by Cholesky, falling back to partial-pivoting LU.
///
/// A few steps of iterative refinement are applied; the result is rejected if
/// the relative residual stays above [`SOLVE_TOLERANCE`].
pub fn solve_surfels(sys: &AssembledSystem) -> Result<Surfels> {
    let dn = sys.btilde.len();
    let rhs = Mat::<f64>::from_fn(dn, 1, |r, _| sys.btilde[r]);

    enum Factor {
        Llt(faer::linalg::solvers::Llt<f64>),
        Lu(faer::linalg::solvers::PartialPivLu<f64>),
    }
    let (factor, method, condition_estimate) = match sys.atilde.llt(Side::Lower) {
        Ok(llt) => {
            let (lo, hi) = diag_range(llt.L());
            let cond = (hi / lo).powi(2);
            (Factor::Llt(llt), SolveMethod::Cholesky, cond)
        }
        Err(_) => {
            log::warn!("Cholesky factorization failed; falling back to LU");
            let lu = sys.atilde.partial_piv_lu();
            let (lo, hi) = diag_range(lu.U());
            let cond = hi / lo;
            if !cond.is_finite() {
                return Err(Error::SolveFailed {
                    condition_estimate: cond,
                });
            }
            (Factor::Lu(lu), SolveMethod::Lu, cond)
        }
    };
    let solve = |b: &Mat<f64>| -> Mat<f64> {
        match &factor {
            Factor::Llt(f) => f.solve(b),
            Factor::Lu(f) => f.solve(b),
        }
    };

    let x = solve(&rhs);
    let mut mu: Vec<f64> = (0..dn).map(|r| x[(r, 0)]).collect();
    let mut residual = sys.relative_residual(&mu);
    for _ in 0..MAX_REFINEMENT_STEPS {
        if !residual.is_finite() || residual <= 1e-14 {
            break;
        }
        let ax = sys.atilde_times(&mu);
        let r = Mat::<f64>::from_fn(dn, 1, |i, _| sys.btilde[i] - ax[i]);
        let dx = solve(&r);
        let candidate: Vec<f64> = (0..dn).map(|i| mu[i] + dx[(i, 0)]).collect();
        let refined = sys.relative_residual(&candidate);
        if refined < residual {
            mu = candidate;
            residual = refined;
        } else {
            break;
        }
    }
    if !(residual <= SOLVE_TOLERANCE) {
        return Err(Error::ResidualTooLarge {
            residual,
            condition_estimate,
        });
    }
    Ok(Surfels {
        dim: sys.dim,
        mu,
        method,
        relative_residual: residual,
        condition_estimate,
    })
}

fn diag_range(m: faer::MatRef<'_, f64>) -> (f64, f64) {
    (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(
        (f64::INFINITY, 0.0_f64),
        |(lo, hi), v| (lo.min(v), hi.max(v)),
    )
}

/// Winding clearness error with its three constituents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WceReport {
    /// Objective value at the solved surfels (sum of the three terms).
    pub total: f64,
    /// `1/N |A1 mu - b|^2`
    pub data_term: f64,
    /// `eta/(2N) |A2 mu|^2`
    pub box_term: f64,
    /// `alpha/N mu^T R mu`
    pub reg_term: f64,
    /// `1/N (b^T b - b^T A1 mu)`, equal to `total` at the exact minimizer.
    pub closed_form: f64,
}

/// Residual vectors `A1 mu - b` and `A2 mu` at given surfels.
pub(crate) struct Residuals {
    pub on_surface: Vec<f64>,
    pub on_box: Vec<f64>,
}

pub(crate) fn residuals(sys: &AssembledSystem, mu: &[f64]) -> Residuals {
    let mut on_surface = matvec(&sys.a1, mu);
    on_surface.iter_mut().for_each(|v| *v -= ON_SURFACE_VALUE);
    Residuals {
        on_surface,
        on_box: matvec(&sys.a2, mu),
    }
}

/// Evaluates the objective and the closed form at arbitrary surfels.
pub fn evaluate_objective(sys: &AssembledSystem, mu: &[f64]) -> WceReport {
    let n = sys.n_points() as f64;
    let res = residuals(sys, mu);
    let data_term = res.on_surface.iter().map(|v| v * v).sum::<f64>() / n;
    let box_term = 0.5 * sys.eta * res.on_box.iter().map(|v| v * v).sum::<f64>() / n;
    let reg_term = sys.alpha
        * sys
            .rdiag
            .iter()
            .zip(mu)
            .map(|(r, m)| r * m * m)
            .sum::<f64>()
        / n;
    // b^T A1 mu = 1/2 * sum(A1 mu) and b^T b = N/4.
    let b_a1_mu: f64 = res
        .on_surface
        .iter()
        .map(|v| ON_SURFACE_VALUE * (v + ON_SURFACE_VALUE))
        .sum();
    let btb = n * ON_SURFACE_VALUE * ON_SURFACE_VALUE;
    WceReport {
        total: data_term + box_term + reg_term,
        data_term,
        box_term,
        reg_term,
        closed_form: (btb - b_a1_mu) / n,
    }
}

/// Assembles, solves and evaluates `W(P)`.
pub fn winding_clearness(
    cloud: &PointCloud,
    boxq: &BoxSamples,
    cfg: &WindingConfig,
) -> Result<(WceReport, Surfels)> {
    let sys = assemble(cloud, boxq, cfg)?;
    let mu = solve_surfels(&sys)?;
    Ok((evaluate_objective(&sys, mu.as_slice()), mu))
}

fn field_at<const D: usize>(x: &[f64], cloud: &[f64], mu: &[f64], width: f64) -> f64 {
    let x = as_array::<D>(x);
    cloud
        .chunks_exact(D)
        .zip(mu.chunks_exact(D))
        .map(|(p, m)| {
            let k = kernel_mod::<D>(x, as_array(p), width);
            (0..D).map(|c| k[c] * m[c]).sum::<f64>()
        })
        .sum()
}

/// Winding field `chi(x) = sum_i K~(x, p_i) . mu_i` at each query point.
pub fn winding_field(
    cloud: &PointCloud,
    surfels: &Surfels,
    queries: &PointCloud,
    cfg: &WindingConfig,
) -> Result<Vec<f64>> {
    let d = cloud.dim();
    for found in [queries.dim(), surfels.dim()] {
        if found != d {
            return Err(Error::DimMismatch { expected: d, found });
        }
    }
    if surfels.len() != cloud.len() {
        return Err(Error::ShapeMismatch {
            expected: cloud.len(),
            found: surfels.len(),
        });
    }
    let eval = |x: &[f64]| match d {
        2 => field_at::<2>(x, cloud.coords(), surfels.as_slice(), cfg.width),
        _ => field_at::<3>(x, cloud.coords(), surfels.as_slice(), cfg.width),
    };
    let q: Vec<&[f64]> = queries.points().collect();
    Ok(q.par_iter().map(|x| eval(x)).collect())
}

/// Field values on a regular grid over `[-extent, extent]^dim`.
///
/// `values` is row-major with x varying fastest: index
/// `ix + res * (iy + res * iz)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub dim: usize,
    pub resolution: usize,
    pub extent: f64,
    pub values: Vec<f64>,
}

impl FieldGrid {
    /// Coordinate of grid index `i` along any axis.
    pub fn axis_coord(&self, i: usize) -> f64 {
        grid_coord(i, self.resolution, self.extent)
    }

    /// Grid rows of length `resolution`, in storage order.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.resolution)
    }
}

fn grid_coord(i: usize, res: usize, extent: f64) -> f64 {
    -extent + 2.0 * extent * i as f64 / (res - 1) as f64
}

pub fn field_grid(
    cloud: &PointCloud,
    surfels: &Surfels,
    resolution: usize,
    extent: f64,
    cfg: &WindingConfig,
) -> Result<FieldGrid> {
    if resolution < 2 {
        return Err(Error::InvalidParameter(format!("grid resolution must be >= 2, got {resolution}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid extent must be > 0, got {extent}")));
    }
    let d = cloud.dim();
    let total = resolution.pow(d as u32);
    let mut coords = Vec::with_capacity(total * d);
    for idx in 0..total {
        let mut rem = idx;
        for _ in 0..d {
            coords.push(grid_coord(rem % resolution, resolution, extent));
            rem /= resolution;
        }
    }
    let queries = PointCloud::new(d, coords)?;
    let values = winding_field(cloud, surfels, &queries, cfg)?;
    Ok(FieldGrid {
        dim: d,
        resolution,
        extent,
        values,
    })
}
