//! Point-level quality metrics: Chamfer distance, normal consistency,
//! F-score and mean absolute distance-to-surface.
//!
//! All metrics reduce to nearest-neighbor queries between two clouds.
//! Reference clouds up to [`EXHAUSTIVE_LIMIT`] points are searched
//! exhaustively; larger ones through a uniform bucket grid, which returns the
//! same nearest distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Default F-score threshold.
pub const DEFAULT_TAU: f64 = 7.5e-3;

/// Reference size above which the bucket grid is used.
pub const EXHAUSTIVE_LIMIT: usize = 5000;

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

struct BucketGrid {
    lo: Vec<f64>,
    cell: f64,
    dims: Vec<usize>,
    start: Vec<usize>,
    items: Vec<usize>,
}

impl BucketGrid {
    fn new(cloud: &PointCloud) -> Self {
        let d = cloud.dim();
        let (lo, hi) = cloud.bounding_box();
        let extent = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max)
            .max(1e-12);
        let per_axis = (cloud.len() as f64).powf(1.0 / d as f64).ceil().max(1.0);
        let cell = extent / per_axis;
        let dims: Vec<usize> = (0..d)
            .map(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).max(1))
            .collect();
        let total: usize = dims.iter().product();
        let mut counts = vec![0usize; total + 1];
        let keys: Vec<usize> = cloud
            .points()
            .map(|p| {
                let idx: Vec<isize> = (0..d).map(|k| ((p[k] - lo[k]) / cell).floor() as isize).collect();
                Self::flat(&dims, &idx).expect("point inside its own grid")
            })
            .collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for c in 1..=total {
            counts[c] += counts[c - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; keys.len()];
        for (i, &k) in keys.iter().enumerate() {
            items[fill[k]] = i;
            fill[k] += 1;
        }
        Self {
            lo,
            cell,
            dims,
            start: counts,
            items,
        }
    }

    fn flat(dims: &[usize], idx: &[isize]) -> Option<usize> {
        let mut key = 0;
        for k in (0..dims.len()).rev() {
            let i = idx[k];
            if i < 0 || i as usize >= dims[k] {
                return None;
            }
            key = key * dims[k] + i as usize;
        }
        Some(key)
    }

    fn nearest(&self, cloud: &PointCloud, q: &[f64]) -> (usize, f64) {
        let d = self.dims.len();
        let home: Vec<isize> = (0..d)
            .map(|k| ((q[k] - self.lo[k]) / self.cell).floor() as isize)
            .collect();
        // Farthest ring that can still contain grid cells.
        let max_ring = (0..d)
            .map(|k| home[k].abs().max((self.dims[k] as isize - 1 - home[k]).abs()))
            .max()
            .unwrap_or(0);
        let mut best = (usize::MAX, f64::INFINITY);
        let mut idx = vec![0isize; d];
        for ring in 0..=max_ring {
            // Visit the cells whose Chebyshev index distance is exactly `ring`.
            let side = 2 * ring + 1;
            let total = (side as usize).pow(d as u32);
            for n in 0..total {
                let mut rem = n;
                let mut on_shell = false;
                for k in 0..d {
                    let off = (rem % side as usize) as isize - ring;
                    rem /= side as usize;
                    on_shell |= off.abs() == ring;
                    idx[k] = home[k] + off;
                }
                if !on_shell {
                    continue;
                }
                if let Some(key) = Self::flat(&self.dims, &idx) {
                    for &i in &self.items[self.start[key]..self.start[key + 1]] {
                        let r = dist(q, cloud.point(i));
                        if r < best.1 || (r == best.1 && i < best.0) {
                            best = (i, r);
                        }
                    }
                }
            }
            // Anything in a farther ring is at least `ring * cell` away.
            if best.1 <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest-neighbor lookup into a fixed reference cloud.
pub struct NearestNeighbors<'a> {
    cloud: &'a PointCloud,
    grid: Option<BucketGrid>,
}

impl<'a> NearestNeighbors<'a> {
    pub fn new(cloud: &'a PointCloud) -> Self {
        if cloud.len() > EXHAUSTIVE_LIMIT {
            Self::with_grid(cloud)
        } else {
            Self::exhaustive(cloud)
        }
    }

    pub fn exhaustive(cloud: &'a PointCloud) -> Self {
        Self { cloud, grid: None }
    }

    pub fn with_grid(cloud: &'a PointCloud) -> Self {
        Self {
            cloud,
            grid: Some(BucketGrid::new(cloud)),
        }
    }

    /// Index of and distance to the nearest reference point. Ties go to the
    /// lowest index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        match &self.grid {
            Some(g) => g.nearest(self.cloud, q),
            None => {
                let mut best = (usize::MAX, f64::INFINITY);
                for (i, p) in self.cloud.points().enumerate() {
                    let r = dist(q, p);
                    if r < best.1 {
                        best = (i, r);
                    }
                }
                best
            }
        }
    }

    /// Nearest neighbor of every point of `queries`, in order.
    pub fn nearest_all(&self, queries: &PointCloud) -> Vec<(usize, f64)> {
        let q: Vec<&[f64]> = queries.points().collect();
        q.par_iter().map(|p| self.nearest(p)).collect()
    }
}

fn check_pair(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Mean distance from each point of `from` to its nearest point in `to`.
pub fn directed_mean_distance(from: &PointCloud, to: &PointCloud) -> Result<f64> {
    check_pair(from, to)?;
    let nn = NearestNeighbors::new(to);
    Ok(mean(nn.nearest_all(from).into_iter().map(|(_, r)| r)))
}

/// Two-way Chamfer distance: the sum of both directed mean distances.
pub fn chamfer(cloud: &PointCloud, reference: &PointCloud) -> Result<f64> {
    Ok(directed_mean_distance(cloud, reference)? + directed_mean_distance(reference, cloud)?)
}

/// Mean absolute distance from `cloud` to a dense reference sampling.
pub fn mads(cloud: &PointCloud, dense_reference: &PointCloud) -> Result<f64> {
    directed_mean_distance(cloud, dense_reference)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

fn fraction_below(from: &PointCloud, to: &PointCloud, tau: f64) -> f64 {
    let nn = NearestNeighbors::new(to);
    let hits = nn.nearest_all(from).iter().filter(|(_, r)| *r < tau).count();
    hits as f64 / from.len() as f64
}

/// Precision, recall and their harmonic mean at distance threshold `tau`.
pub fn precision_recall(cloud: &PointCloud, reference: &PointCloud, tau: f64) -> Result<FScore> {
    check_pair(cloud, reference)?;
    let precision = fraction_below(cloud, reference, tau);
    let recall = fraction_below(reference, cloud, tau);
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(FScore {
        precision,
        recall,
        fscore,
    })
}

pub fn f_score(cloud: &PointCloud, reference: &PointCloud, tau: f64) -> Result<f64> {
    Ok(precision_recall(cloud, reference, tau)?.fscore)
}

fn unit_normals(cloud: &PointCloud) -> Result<Vec<f64>> {
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::InvalidParameter("normal consistency needs normals on both clouds".into()))?;
    let d = cloud.dim();
    let mut zero = Vec::new();
    let mut out = Vec::with_capacity(normals.len());
    for (i, n) in normals.chunks_exact(d).enumerate() {
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len == 0.0 {
            zero.push(i);
        } else {
            out.extend(n.iter().map(|v| v / len));
        }
    }
    if zero.is_empty() {
        Ok(out)
    } else {
        Err(Error::ZeroNormal(zero))
    }
}

fn directed_nc(from: &PointCloud, from_n: &[f64], to: &PointCloud, to_n: &[f64]) -> f64 {
    let d = from.dim();
    let nn = NearestNeighbors::new(to);
    mean(nn.nearest_all(from).into_iter().enumerate().map(|(i, (j, _))| {
        let a = &from_n[i * d..(i + 1) * d];
        let b = &to_n[j * d..(j + 1) * d];
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs()
    }))
}

/// Symmetric normal consistency `0.5 * (NC(A, B) + NC(B, A))`, where
/// `NC(A, B)` averages `|n_a . n_b|` over each point of `A` and its nearest
/// neighbor in `B`. Normals are normalized before use.
pub fn normal_consistency(cloud: &PointCloud, reference: &PointCloud) -> Result<f64> {
    check_pair(cloud, reference)?;
    let a = unit_normals(cloud)?;
    let b = unit_normals(reference)?;
    Ok(0.5 * (directed_nc(cloud, &a, reference, &b) + directed_nc(reference, &b, cloud, &a)))
}

/// All point-level metrics of a cloud against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    /// `None` when either cloud lacks normals.
    pub nc: Option<f64>,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub mads: f64,
    pub wce: Option<f64>,
}

pub fn evaluate(cloud: &PointCloud, reference: &PointCloud, tau: f64) -> Result<MetricsReport> {
    let f = precision_recall(cloud, reference, tau)?;
    let nc = match (cloud.normals(), reference.normals()) {
        (Some(_), Some(_)) => Some(normal_consistency(cloud, reference)?),
        _ => None,
    };
    Ok(MetricsReport {
        cd: chamfer(cloud, reference)?,
        nc,
        fscore: f.fscore,
        precision: f.precision,
        recall: f.recall,
        mads: mads(cloud, reference)?,
        wce: None,
    })
}
