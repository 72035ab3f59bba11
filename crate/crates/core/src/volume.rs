//! Attenuation volumes, clipping-plane partitioning and trilinear sampling.
//!
//! Attenuation is stored in mm⁻¹ with background exactly `0.0`, so that the
//! projection of a volume equals the sum of the projections of its clipped
//! slabs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// A 3-D attenuation grid. Voxel `(i, j, k)` has its center at
/// `origin + (i, j, k) * spacing`; data is stored x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3], data: Vec<f32>) -> Result<Self> {
        validate_grid(dims, spacing)?;
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("volume origin must be finite"));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume data has {} values, dims {:?} require {}",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(bad) = data.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::param(format!(
                "attenuation values must be finite and >= 0, found {bad}"
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Volume::new(dims, spacing, origin, vec![0.0; n])
    }

    /// Origin placing the lattice center at the world origin.
    pub fn centered_origin(dims: [usize; 3], spacing: [f32; 3]) -> [f32; 3] {
        let mut origin = [0.0f32; 3];
        for a in 0..3 {
            origin[a] = -((dims[a] - 1) as f32) * spacing[a] / 2.0;
        }
        origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// World coordinate (mm) of a voxel center.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let ijk = [i, j, k];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = self.origin[a] as f64 + ijk[a] as f64 * self.spacing[a] as f64;
        }
        p
    }

    /// Range of voxel-center coordinates along `axis`.
    pub fn extent(&self, axis: usize) -> (f64, f64) {
        let lo = self.origin[axis] as f64;
        (lo, lo + (self.dims[axis] - 1) as f64 * self.spacing[axis] as f64)
    }

    /// Axis-aligned box spanned by the voxel centers.
    pub fn lattice_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            (lo[a], hi[a]) = self.extent(a);
        }
        (lo, hi)
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing && self.origin == other.origin
    }

    /// `alpha * self + beta * other`, voxel-wise.
    pub fn combine(&self, alpha: f32, other: &Volume, beta: f32) -> Result<Volume> {
        if !self.same_grid(other) {
            return Err(Error::shape("volumes live on different grids"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Volume::new(self.dims, self.spacing, self.origin, data)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }
}

pub(crate) fn validate_grid(dims: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::param(format!("volume dims must be >= 2, got {dims:?}")));
    }
    if dims.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n)).is_none() {
        return Err(Error::param(format!("volume dims {dims:?} overflow")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::param(format!(
            "voxel spacing must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Coronal clipping planes along one axis. `d = boundaries.len() + 1`
/// slabs result; slab `i` holds voxel centers in `(b[i-1], b[i]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub axis: usize,
    pub boundaries: Vec<f64>,
}

impl ClipPlan {
    pub fn new(axis: usize, boundaries: Vec<f64>) -> Self {
        ClipPlan { axis, boundaries }
    }

    /// Equally spaced planes producing `d` slabs of equal thickness.
    pub fn uniform(v: &Volume, axis: usize, d: usize) -> Result<ClipPlan> {
        if axis > 2 || d < 2 {
            return Err(Error::param("uniform clip plan needs axis <= 2 and d >= 2"));
        }
        let (lo, hi) = v.extent(axis);
        let boundaries = (1..d)
            .map(|i| lo + (hi - lo) * i as f64 / d as f64)
            .collect();
        Ok(ClipPlan { axis, boundaries })
    }

    pub fn components(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn validate(&self, v: &Volume) -> Result<()> {
        if self.axis > 2 {
            return Err(Error::param(format!("clip axis {} is not 0, 1 or 2", self.axis)));
        }
        if self.boundaries.is_empty() {
            return Err(Error::param("clip plan needs at least one boundary (d >= 2)"));
        }
        let (lo, hi) = v.extent(self.axis);
        for (n, &b) in self.boundaries.iter().enumerate() {
            if !b.is_finite() || b <= lo || b >= hi {
                return Err(Error::param(format!(
                    "clip boundary {b} lies outside the volume extent ({lo}, {hi}) along axis {}",
                    self.axis
                )));
            }
            if n > 0 && b <= self.boundaries[n - 1] {
                return Err(Error::param("clip boundaries must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Slab index of a coordinate along the clip axis; ties go to the lower slab.
    pub fn slab_of(&self, coord: f64) -> usize {
        self.boundaries.iter().filter(|&&b| b < coord).count()
    }
}

/// Splits `v` into `d` background-padded sub-volumes whose voxel-wise sum is `v`.
pub fn clip_volume(v: &Volume, plan: &ClipPlan) -> Result<Vec<Volume>> {
    plan.validate(v)?;
    let d = plan.components();
    let axis_len = v.dims[plan.axis];
    let slab_by_index: Vec<usize> = (0..axis_len)
        .map(|n| {
            let c = v.origin[plan.axis] as f64 + n as f64 * v.spacing[plan.axis] as f64;
            plan.slab_of(c)
        })
        .collect();

    let mut outputs = vec![vec![0.0f32; v.len()]; d];
    let [nx, ny, nz] = v.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let along = [i, j, k][plan.axis];
                let idx = v.index(i, j, k);
                outputs[slab_by_index[along]][idx] = v.data[idx];
            }
        }
    }
    Ok(outputs
        .into_iter()
        .map(|data| Volume {
            dims: v.dims,
            spacing: v.spacing,
            origin: v.origin,
            data,
        })
        .collect())
}

/// Trilinear interpolation at world point `p` (mm). Points outside the hull
/// of the voxel centers sample as background.
pub fn sample_trilinear(v: &Volume, p: Vec3) -> f64 {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let f = (p[a] - v.origin[a] as f64) / v.spacing[a] as f64;
        let last = (v.dims[a] - 1) as f64;
        if !(f >= 0.0 && f <= last) {
            return 0.0;
        }
        let i0 = (f.floor() as usize).min(v.dims[a] - 2);
        base[a] = i0;
        frac[a] = f - i0 as f64;
    }
    let [i, j, k] = base;
    let [tx, ty, tz] = frac;
    let c = |di: usize, dj: usize, dk: usize| v.get(i + di, j + dj, k + dk) as f64;
    let c00 = c(0, 0, 0) * (1.0 - tx) + c(1, 0, 0) * tx;
    let c10 = c(0, 1, 0) * (1.0 - tx) + c(1, 1, 0) * tx;
    let c01 = c(0, 0, 1) * (1.0 - tx) + c(1, 0, 1) * tx;
    let c11 = c(0, 1, 1) * (1.0 - tx) + c(1, 1, 1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        let data = (0..n).map(|x| (x % 7) as f32 * 0.25).collect();
        Volume::new(dims, [1.0, 2.0, 0.5], [-3.0, 1.0, 0.0], data).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Volume::zeros([1, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Volume::zeros([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![-1.0; 8]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![f32::NAN; 8]).is_err());
    }

    #[test]
    fn clip_sum_is_exact() {
        let v = ramp([5, 9, 4]);
        let plan = ClipPlan::new(1, vec![4.0, 10.0]);
        let parts = clip_volume(&v, &plan).unwrap();
        assert_eq!(parts.len(), 3);
        for idx in 0..v.len() {
            let s: f32 = parts.iter().map(|p| p.data()[idx]).sum();
            assert_eq!(s, v.data()[idx]);
            assert_eq!(parts.iter().filter(|p| p.data()[idx] != 0.0).count() <= 1, true);
        }
    }

    #[test]
    fn boundary_ties_go_to_lower_slab() {
        let v = Volume::new([2, 3, 2], [1.0; 3], [0.0; 3], vec![1.0; 12]).unwrap();
        // Voxel centers along y: 0, 1, 2. A plane at 1.0 puts y=1 in slab 0.
        let parts = clip_volume(&v, &ClipPlan::new(1, vec![1.0])).unwrap();
        assert_eq!(parts[0].get(0, 1, 0), 1.0);
        assert_eq!(parts[1].get(0, 1, 0), 0.0);
        assert_eq!(parts[1].get(0, 2, 0), 1.0);
    }

    #[test]
    fn midpoint_plane_halves_uniform_volume() {
        let v = Volume::new([6, 8, 4], [1.0; 3], [0.0; 3], vec![0.5; 192]).unwrap();
        let (lo, hi) = v.extent(1);
        let parts = clip_volume(&v, &ClipPlan::new(1, vec![(lo + hi) / 2.0])).unwrap();
        // Brute-force count of voxels per slab.
        let mut below = 0;
        for k in 0..4 {
            for j in 0..8 {
                for i in 0..6 {
                    if v.voxel_center(i, j, k)[1] <= (lo + hi) / 2.0 {
                        below += 1;
                    }
                }
            }
        }
        assert_eq!(parts[0].count_nonzero(), below);
        assert_eq!(parts[1].count_nonzero(), 192 - below);
        assert_eq!(below, 96);
    }

    #[test]
    fn zero_volume_clips_to_zeros() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let parts = clip_volume(&v, &ClipPlan::uniform(&v, 1, 3).unwrap()).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.count_nonzero() == 0));
    }

    #[test]
    fn clip_rejects_out_of_extent_boundaries() {
        let v = ramp([4, 4, 4]);
        let (lo, hi) = v.extent(1);
        assert!(clip_volume(&v, &ClipPlan::new(1, vec![lo])).is_err());
        assert!(clip_volume(&v, &ClipPlan::new(1, vec![hi + 1.0])).is_err());
        assert!(clip_volume(&v, &ClipPlan::new(1, vec![])).is_err());
        assert!(clip_volume(&v, &ClipPlan::new(3, vec![2.0])).is_err());
        let mid = (lo + hi) / 2.0;
        assert!(clip_volume(&v, &ClipPlan::new(1, vec![mid, mid])).is_err());
    }

    #[test]
    fn trilinear_reproduces_nodes() {
        let v = ramp([4, 5, 3]);
        for k in 0..3 {
            for j in 0..5 {
                for i in 0..4 {
                    let s = sample_trilinear(&v, v.voxel_center(i, j, k));
                    assert_eq!(s, v.get(i, j, k) as f64);
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_and_background() {
        let mut data = vec![0.0f32; 8];
        for k in 0..2 {
            for j in 0..2 {
                data[1 + 2 * (j + 2 * k)] = 1.0;
            }
        }
        let v = Volume::new([2, 2, 2], [2.0; 3], [0.0; 3], data).unwrap();
        assert_eq!(sample_trilinear(&v, [1.0, 0.0, 0.0]), 0.5);
        assert_eq!(sample_trilinear(&v, [1.0, 1.3, 0.7]), 0.5);
        assert_eq!(sample_trilinear(&v, [1e6, 0.0, 0.0]), 0.0);
        assert_eq!(sample_trilinear(&v, [-0.01, 0.0, 0.0]), 0.0);
        assert_eq!(sample_trilinear(&v, [f64::NAN, 0.0, 0.0]), 0.0);
    }
}
