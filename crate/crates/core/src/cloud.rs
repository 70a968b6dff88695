//! Point clouds, box samples and the shape generators used by the experiments.
//!
//! Coordinates are stored flat (`dim` components per point) so that a cloud
//! can be handed to the optimizer as one parameter vector without copying.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::RngStream;

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::UnsupportedDim(dim))
    }
}

/// An ordered set of 2D or 3D points, optionally carrying per-point normals.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    normals: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud from flat coordinates (`dim` values per point).
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        check_dim(dim)?;
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if coords.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coordinates is not a multiple of dim {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { index: pos / dim });
        }
        Ok(Self {
            dim,
            coords,
            normals: None,
        })
    }

    pub fn from_points<P: AsRef<[f64]>>(dim: usize, points: &[P]) -> Result<Self> {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Self::new(dim, coords)
    }

    /// Attaches normals (flat, `dim` values per point). Normals are not
    /// required to be unit length.
    pub fn with_normals(mut self, normals: Vec<f64>) -> Result<Self> {
        if normals.len() != self.coords.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                found: normals.len() / self.dim,
            });
        }
        if let Some(pos) = normals.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                index: pos / self.dim,
            });
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn normals(&self) -> Option<&[f64]> {
        self.normals.as_deref()
    }

    pub fn normal(&self, i: usize) -> Option<&[f64]> {
        self.normals
            .as_ref()
            .map(|n| &n[i * self.dim..(i + 1) * self.dim])
    }

    /// Axis-aligned bounding box as `(min, max)` corners.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points() {
            for k in 0..self.dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Largest absolute value of any coordinate, measured from `center`.
    pub fn max_abs_from(&self, center: &[f64]) -> f64 {
        self.points()
            .flat_map(|p| p.iter().zip(center).map(|(a, c)| (a - c).abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_coord(&self) -> f64 {
        self.coords.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Copies the points with the given indices, normals included.
    pub fn select(&self, indices: &[usize]) -> Self {
        let d = self.dim;
        let mut coords = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        let normals = self.normals.as_ref().map(|n| {
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&n[i * d..(i + 1) * d]);
            }
            out
        });
        Self {
            dim: d,
            coords,
            normals,
        }
    }

    pub fn translated(&self, offset: &[f64]) -> Self {
        assert_eq!(offset.len(), self.dim);
        let mut out = self.clone();
        for p in out.coords.chunks_exact_mut(self.dim) {
            for (c, o) in p.iter_mut().zip(offset) {
                *c += o;
            }
        }
        out
    }

    /// Replaces the coordinates, keeping the dimension. Normals are dropped
    /// since they no longer describe the moved points.
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, coords)
    }
}

/// Scale-and-shift map produced by [`normalize_cloud`]: `p' = (p - center) * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizeTransform {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.center)
            .map(|(x, c)| (x - c) * self.scale)
            .collect()
    }

    pub fn invert(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(&self.center)
            .map(|(x, c)| x / self.scale + c)
            .collect()
    }

    /// Maps a normalized cloud back to the original frame.
    pub fn invert_cloud(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let coords = cloud.points().flat_map(|p| self.invert(p)).collect();
        PointCloud::new(cloud.dim(), coords)
    }
}

/// Centers the cloud on its bounding-box midpoint and scales it so that the
/// longest bounding-box axis has length 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<(PointCloud, NormalizeTransform)> {
    let (lo, hi) = cloud.bounding_box();
    let extent = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| b - a)
        .fold(0.0, f64::max);
    if cloud.len() < 2 || extent <= 0.0 {
        return Err(Error::ZeroExtent);
    }
    let transform = NormalizeTransform {
        center: lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        scale: 1.0 / extent,
    };
    let coords = cloud.points().flat_map(|p| transform.apply(p)).collect();
    let mut out = PointCloud::new(cloud.dim(), coords)?;
    if let Some(n) = cloud.normals() {
        out = out.with_normals(n.to_vec())?;
    }
    Ok((out, transform))
}

/// Perturbs every coordinate independently by `N(0, sigma^2)`.
pub fn add_gaussian_noise(cloud: &PointCloud, sigma: f64, rng: &mut RngStream) -> Result<PointCloud> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let coords = cloud
        .coords()
        .iter()
        .map(|c| c + sigma * rng.standard_normal())
        .collect();
    cloud.with_coords(coords)
}

/// Fixed sample points on the boundary of an axis-aligned cube
/// `[center - h, center + h]^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSamples {
    dim: usize,
    half_extent: f64,
    center: Vec<f64>,
    coords: Vec<f64>,
}

impl BoxSamples {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim)
    }

    /// The same samples on a box shifted by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        assert_eq!(offset.len(), self.dim);
        let mut out = self.clone();
        for (c, o) in out.center.iter_mut().zip(offset) {
            *c += o;
        }
        for p in out.coords.chunks_exact_mut(self.dim) {
            for (c, o) in p.iter_mut().zip(offset) {
                *c += o;
            }
        }
        out
    }

    /// Checks that the cloud lies strictly inside the box.
    pub fn check_encloses(&self, cloud: &PointCloud) -> Result<()> {
        if cloud.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: cloud.dim(),
            });
        }
        let max_abs = cloud.max_abs_from(&self.center);
        if max_abs >= self.half_extent {
            return Err(Error::BoxTooSmall {
                half_extent: self.half_extent,
                max_abs,
            });
        }
        Ok(())
    }
}

/// Samples `count` points uniformly by area over the boundary of `[-h, h]^dim`.
///
/// A face is drawn uniformly among the `2 * dim` equal-area faces, then a
/// point uniformly on that face.
pub fn sample_bounding_box(
    dim: usize,
    half_extent: f64,
    count: usize,
    rng: &mut RngStream,
) -> Result<BoxSamples> {
    check_dim(dim)?;
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "box half extent must be > 0, got {half_extent}"
        )));
    }
    if count < 2 * dim {
        return Err(Error::InvalidParameter(format!(
            "need at least {} box samples, got {count}",
            2 * dim
        )));
    }
    let mut coords = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let face = rng.index(2 * dim);
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        for k in 0..dim {
            if k == axis {
                coords.push(sign * half_extent);
            } else {
                coords.push(rng.uniform_range(-half_extent, half_extent));
            }
        }
    }
    Ok(BoxSamples {
        dim,
        half_extent,
        center: vec![0.0; dim],
        coords,
    })
}

/// `n` points evenly spaced by arc length on a circle centered at the origin,
/// starting on the positive x axis. Normals point outward.
pub fn sample_circle(n: usize, radius: f64) -> Result<PointCloud> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("n must be >= 3, got {n}")));
    }
    let mut coords = Vec::with_capacity(2 * n);
    let mut normals = Vec::with_capacity(2 * n);
    for k in 0..n {
        let t = 2.0 * PI * k as f64 / n as f64;
        let (s, c) = t.sin_cos();
        coords.extend_from_slice(&[radius * c, radius * s]);
        normals.extend_from_slice(&[c, s]);
    }
    PointCloud::new(2, coords)?.with_normals(normals)
}

/// `n` points evenly spaced by perimeter length on the boundary of a
/// `major x minor` rectangle centered at the origin. Normals point outward.
pub fn sample_rectangle(n: usize, major: f64, minor: f64) -> Result<PointCloud> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("n must be >= 3, got {n}")));
    }
    if !(major > 0.0 && minor > 0.0) {
        return Err(Error::InvalidParameter("rectangle sides must be > 0".into()));
    }
    let (a, b) = (0.5 * major, 0.5 * minor);
    let perimeter = 2.0 * (major + minor);
    let step = perimeter / n as f64;
    let mut coords = Vec::with_capacity(2 * n);
    let mut normals = Vec::with_capacity(2 * n);
    // Edges counter-clockwise from the bottom-left corner: start, direction,
    // length and outward normal.
    let edges = [
        ([-a, -b], [1.0, 0.0], major, [0.0, -1.0]),
        ([a, -b], [0.0, 1.0], minor, [1.0, 0.0]),
        ([a, b], [-1.0, 0.0], major, [0.0, 1.0]),
        ([-a, b], [0.0, -1.0], minor, [-1.0, 0.0]),
    ];
    for k in 0..n {
        let mut s = (k as f64 + 0.5) * step;
        let mut edge = 0;
        while edge < 3 && s >= edges[edge].2 {
            s -= edges[edge].2;
            edge += 1;
        }
        let (start, dir, len, nrm) = edges[edge];
        let s = s.min(len);
        coords.extend_from_slice(&[start[0] + s * dir[0], start[1] + s * dir[1]]);
        normals.extend_from_slice(&nrm);
    }
    PointCloud::new(2, coords)?.with_normals(normals)
}

/// `n` points on a sphere centered at the origin from a Fibonacci lattice,
/// which is close to uniform by area. Normals point outward.
pub fn sample_sphere(n: usize, radius: f64) -> Result<PointCloud> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("n must be >= 3, got {n}")));
    }
    let golden = PI * (3.0 - 5.0_f64.sqrt());
    let mut coords = Vec::with_capacity(3 * n);
    let mut normals = Vec::with_capacity(3 * n);
    for k in 0..n {
        let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).max(0.0).sqrt();
        let (s, c) = (golden * k as f64).sin_cos();
        let nrm = [r * c, r * s, z];
        coords.extend(nrm.iter().map(|v| radius * v));
        normals.extend_from_slice(&nrm);
    }
    PointCloud::new(3, coords)?.with_normals(normals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_cloud() -> PointCloud {
        PointCloud::from_points(3, &[[0.0, 0.0, 0.0], [2.0, 1.0, 1.0], [1.0, 0.5, 0.2]]).unwrap()
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(PointCloud::new(3, vec![]), Err(Error::EmptyCloud)));
        assert!(matches!(PointCloud::new(4, vec![0.0; 4]), Err(Error::UnsupportedDim(4))));
        assert!(matches!(
            PointCloud::new(2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 0 })
        ));
        assert!(PointCloud::new(3, vec![0.0; 4]).is_err());
    }

    #[test]
    fn normalize_scales_longest_axis_to_one() {
        let (out, t) = normalize_cloud(&cube_cloud()).unwrap();
        assert_eq!(t.scale, 0.5);
        let (lo, hi) = out.bounding_box();
        assert!((hi[0] - lo[0] - 1.0).abs() < 1e-15);
        for k in 0..3 {
            assert!((hi[k] + lo[k]).abs() < 1e-15);
        }
        let back = t.invert_cloud(&out).unwrap();
        for (a, b) in back.coords().iter().zip(cube_cloud().coords()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let (once, _) = normalize_cloud(&cube_cloud()).unwrap();
        let (twice, t) = normalize_cloud(&once).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.center.iter().all(|c| c.abs() < 1e-12));
        for (a, b) in once.coords().iter().zip(twice.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_repeated_point() {
        let cloud = PointCloud::from_points(2, &[[0.3, 0.3], [0.3, 0.3]]).unwrap();
        assert!(matches!(normalize_cloud(&cloud), Err(Error::ZeroExtent)));
    }

    #[test]
    fn zero_noise_is_identity() {
        let c = sample_circle(50, 0.5).unwrap();
        let out = add_gaussian_noise(&c, 0.0, &mut RngStream::new(3)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn noise_depends_on_seed() {
        let c = sample_circle(50, 0.5).unwrap();
        let a = add_gaussian_noise(&c, 0.01, &mut RngStream::new(1)).unwrap();
        let b = add_gaussian_noise(&c, 0.01, &mut RngStream::new(2)).unwrap();
        let a2 = add_gaussian_noise(&c, 0.01, &mut RngStream::new(1)).unwrap();
        assert_ne!(a.coords(), b.coords());
        assert_eq!(a.coords(), a2.coords());
    }

    #[test]
    fn noise_standard_deviation_matches_sigma() {
        let c = sample_sphere(1000, 0.5).unwrap();
        let sigma = 0.005;
        let out = add_gaussian_noise(&c, sigma, &mut RngStream::new(11)).unwrap();
        for k in 0..3 {
            let d: Vec<f64> = out
                .points()
                .zip(c.points())
                .map(|(a, b)| a[k] - b[k])
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
            let sd = var.sqrt();
            assert!((sd - sigma).abs() < 0.1 * sigma, "axis {k}: sd {sd}");
        }
    }

    #[test]
    fn box_samples_lie_on_boundary() {
        let q = sample_bounding_box(2, 0.7, 4000, &mut RngStream::new(5)).unwrap();
        assert_eq!(q.len(), 4000);
        for p in q.points() {
            let m = p.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
            assert!((m - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn box_faces_are_balanced() {
        let m = 6000;
        let q = sample_bounding_box(3, 0.6, m, &mut RngStream::new(9)).unwrap();
        let mut counts = [0usize; 6];
        for p in q.points() {
            let face = (0..3)
                .find_map(|k| {
                    if (p[k] + 0.6).abs() < 1e-12 {
                        Some(2 * k)
                    } else if (p[k] - 0.6).abs() < 1e-12 {
                        Some(2 * k + 1)
                    } else {
                        None
                    }
                })
                .unwrap();
            counts[face] += 1;
        }
        // A multinomial cell with p = 1/6 has sd sqrt(6000 * 5/36) ~ 28.9, so
        // 5% of 1000 is ~1.7 sd.
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn box_sampling_is_deterministic() {
        let a = sample_bounding_box(3, 0.6, 100, &mut RngStream::new(1)).unwrap();
        let b = sample_bounding_box(3, 0.6, 100, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn box_needs_enough_samples() {
        assert!(sample_bounding_box(3, 0.6, 5, &mut RngStream::new(1)).is_err());
        assert!(sample_bounding_box(2, 0.6, 4, &mut RngStream::new(1)).is_ok());
    }

    #[test]
    fn circle_of_four() {
        let c = sample_circle(4, 0.5).unwrap();
        let expected = [[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, -0.5]];
        for (p, e) in c.points().zip(expected) {
            assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn circle_centroid_is_origin() {
        let c = sample_circle(1000, 0.5).unwrap();
        for k in 0..2 {
            let m: f64 = c.points().map(|p| p[k]).sum::<f64>() / 1000.0;
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn rectangle_points_on_boundary() {
        let r = sample_rectangle(1000, 1.0, 0.02).unwrap();
        for p in r.points() {
            assert!(p[0].abs() <= 0.5 + 1e-15 && p[1].abs() <= 0.01 + 1e-15);
            let on_long = (p[1].abs() - 0.01).abs() < 1e-12;
            let on_short = (p[0].abs() - 0.5).abs() < 1e-12;
            assert!(on_long || on_short, "{p:?}");
        }
    }

    #[test]
    fn sphere_points_have_radius() {
        let s = sample_sphere(500, 0.5).unwrap();
        for p in s.points() {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn box_enclosure_check() {
        let c = sample_circle(10, 0.5).unwrap();
        let q = sample_bounding_box(2, 0.5, 10, &mut RngStream::new(0)).unwrap();
        assert!(q.check_encloses(&c).is_err());
        let q = sample_bounding_box(2, 0.7, 10, &mut RngStream::new(0)).unwrap();
        assert!(q.check_encloses(&c).is_ok());
    }
}
