//! C-arm geometry and Beer-Lambert DRR rendering.
//!
//! The C-arm frame coincides with the world frame at zero angles: the beam
//! travels along +y (anterior to posterior), detector columns run along +x
//! and detector rows run from head (+z) to foot.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DecompositionSample;
use crate::error::{Error, Result};
use crate::volume::{clip_volume, sample_trilinear, ClipPlan, Vec3, Volume};

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Detector size as (columns, rows).
    pub detector: [usize; 2],
    pub pixel_pitch_mm: f64,
    pub source_to_detector_mm: f64,
    pub source_to_isocenter_mm: f64,
    /// Principal point in pixels, (column, row).
    pub principal_point: [f64; 2],
}

impl CameraIntrinsics {
    /// Plausible C-arm numbers scaled to a `size`×`size` detector covering
    /// roughly 256 mm at the isocenter.
    pub fn square(size: usize) -> CameraIntrinsics {
        let sdd = 1200.0;
        let sod = 800.0;
        let fov_at_iso = 256.0;
        CameraIntrinsics {
            detector: [size, size],
            pixel_pitch_mm: fov_at_iso * (sdd / sod) / size as f64,
            source_to_detector_mm: sdd,
            source_to_isocenter_mm: sod,
            principal_point: [size as f64 / 2.0, size as f64 / 2.0],
        }
    }

    /// 64×64 desk-scale preset.
    pub fn desk() -> CameraIntrinsics {
        CameraIntrinsics::square(64)
    }

    /// 256×256 full-size preset.
    pub fn full() -> CameraIntrinsics {
        CameraIntrinsics::square(256)
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.detector;
        if w == 0 || h == 0 || w.checked_mul(h).is_none_or(|n| n > 1 << 26) {
            return Err(Error::param(format!("bad detector size {:?}", self.detector)));
        }
        let d = [
            self.pixel_pitch_mm,
            self.source_to_detector_mm,
            self.source_to_isocenter_mm,
        ];
        if d.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::param("camera distances and pixel pitch must be finite and > 0"));
        }
        if self.source_to_detector_mm <= self.source_to_isocenter_mm {
            return Err(Error::param(
                "source-to-detector distance must exceed source-to-isocenter distance",
            ));
        }
        if self.principal_point.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("principal point must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: CameraIntrinsics,
    /// World to C-arm rotation.
    pub rotation: Mat3,
    pub cranial_deg: f64,
    pub lao_rao_deg: f64,
    #[serde(default)]
    pub isocenter: Vec3,
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let r = &self.rotation;
        if r.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Geometry("rotation has non-finite entries".into()));
        }
        let rtr = matmul(&transpose(r), r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (x - want).abs() > 1e-6 {
                    return Err(Error::Geometry("rotation is not orthonormal".into()));
                }
            }
        }
        if (det(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry("rotation is not proper (det != +1)".into()));
        }
        if self.isocenter.iter().any(|x| !x.is_finite()) {
            return Err(Error::Geometry("isocenter must be finite".into()));
        }
        Ok(())
    }

    /// X-ray source position in world coordinates.
    pub fn source(&self) -> Vec3 {
        self.to_world([0.0, -self.intrinsics.source_to_isocenter_mm, 0.0])
    }

    /// World position of the center of detector pixel `(col, row)`.
    pub fn pixel_center(&self, col: usize, row: usize) -> Vec3 {
        let intr = &self.intrinsics;
        let pitch = intr.pixel_pitch_mm;
        let x = (col as f64 + 0.5 - intr.principal_point[0]) * pitch;
        let z = (intr.principal_point[1] - (row as f64 + 0.5)) * pitch;
        let y = intr.source_to_detector_mm - intr.source_to_isocenter_mm;
        self.to_world([x, y, z])
    }

    fn to_world(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut w = self.isocenter;
        for a in 0..3 {
            for b in 0..3 {
                w[a] += r[b][a] * p[b];
            }
        }
        w
    }
}

pub fn rotation_about_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rotation_about_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Pose for a cranial tilt (about the lateral x axis) and a signed LAO angle
/// (about the longitudinal z axis; RAO is negative). Rotations act about
/// the isocenter at the world origin.
pub fn pose_from_angles(intr: &CameraIntrinsics, cranial_deg: f64, lao_rao_deg: f64) -> CameraPose {
    CameraPose {
        intrinsics: intr.clone(),
        rotation: matmul(&rotation_about_x(cranial_deg), &rotation_about_z(lao_rao_deg)),
        cranial_deg,
        lao_rao_deg,
        isocenter: [0.0; 3],
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| {
        if n == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    })
}

/// Cranial-major grid of poses with endpoints included.
pub fn generate_trajectory(
    intr: &CameraIntrinsics,
    cranial_range: (f64, f64),
    lao_rao_range: (f64, f64),
    n_cranial: usize,
    n_lateral: usize,
) -> Result<Vec<CameraPose>> {
    if n_cranial == 0 || n_lateral == 0 {
        return Err(Error::param("trajectory counts must be >= 1"));
    }
    for (lo, hi) in [cranial_range, lao_rao_range] {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::param(format!("bad angle range ({lo}, {hi})")));
        }
    }
    intr.validate()?;
    let mut poses = Vec::with_capacity(n_cranial * n_lateral);
    for cran in linspace(cranial_range.0, cranial_range.1, n_cranial) {
        for lat in linspace(lao_rao_range.0, lao_rao_range.1, n_lateral) {
            poses.push(pose_from_angles(intr, cran, lat));
        }
    }
    Ok(poses)
}

/// What a projection image shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Total,
    Component(usize),
    Reconstruction,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Total => f.write_str("total"),
            Label::Component(i) => write!(f, "component_{i}"),
            Label::Reconstruction => f.write_str("reconstruction"),
        }
    }
}

/// Absorbance image, row-major with `width` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub pose: Option<CameraPose>,
    pub label: Label,
}

impl ProjectionImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>, label: Label) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "image data has {} pixels, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(ProjectionImage {
            width,
            height,
            data,
            pose: None,
            label,
        })
    }

    pub fn zeros(width: usize, height: usize, label: Label) -> Self {
        ProjectionImage {
            width,
            height,
            data: vec![0.0; width * height],
            pose: None,
            label,
        }
    }

    pub fn with_pose(mut self, pose: CameraPose) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_size(&self, other: &ProjectionImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(0.0, f32::max)
    }

    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Half the smallest voxel spacing.
pub fn default_step(v: &Volume) -> f64 {
    let s = v.spacing();
    s.iter().cloned().fold(f32::INFINITY, f32::min) as f64 / 2.0
}

/// Parametric interval `[t0, t1]` of `origin + t * dir` inside an axis-aligned box.
fn clip_ray_to_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 < t1).then_some((t0, t1))
}

/// Line integral of `v` from `source` to `target` by the composite midpoint
/// rule over the part of the segment inside the volume, with a step no
/// longer than `step_mm`.
pub fn ray_integral(v: &Volume, source: Vec3, target: Vec3, step_mm: f64) -> f64 {
    let dir = [target[0] - source[0], target[1] - source[1], target[2] - source[2]];
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let (lo, hi) = v.lattice_bounds();
    let Some((t0, t1)) = clip_ray_to_box(source, dir, lo, hi) else {
        return 0.0;
    };
    let (t0, t1) = (t0.max(0.0), t1.min(1.0));
    if t1 <= t0 {
        return 0.0;
    }
    let length = (t1 - t0) * norm;
    let n = (length / step_mm).ceil().max(1.0) as usize;
    let h = length / n as f64;
    let dt = (t1 - t0) / n as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * dt;
        let p = [source[0] + t * dir[0], source[1] + t * dir[1], source[2] + t * dir[2]];
        acc += sample_trilinear(v, p);
    }
    acc * h
}

/// Absorbance image `-log(I/I0)` of `v` seen from `pose`.
pub fn render_drr(v: &Volume, pose: &CameraPose, step_mm: f64) -> Result<ProjectionImage> {
    if !(step_mm > 0.0) || !step_mm.is_finite() {
        return Err(Error::param(format!("step must be finite and > 0, got {step_mm}")));
    }
    pose.validate()?;
    let [width, height] = pose.intrinsics.detector;
    let source = pose.source();
    let probe = pose.pixel_center(0, 0);
    if probe == source {
        return Err(Error::Geometry("ray direction is zero".into()));
    }
    let mut data = vec![0.0f32; width * height];
    data.par_chunks_mut(width).enumerate().for_each(|(row, line)| {
        for (col, px) in line.iter_mut().enumerate() {
            let target = pose.pixel_center(col, row);
            *px = ray_integral(v, source, target, step_mm) as f32;
        }
    });
    Ok(ProjectionImage {
        width,
        height,
        data,
        pose: Some(pose.clone()),
        label: Label::Total,
    })
}

/// Renders the full volume and each sub-volume at every pose.
pub fn render_samples(
    phantom: &str,
    full: &Volume,
    parts: &[Volume],
    poses: &[CameraPose],
    step_mm: f64,
) -> Result<Vec<DecompositionSample>> {
    if parts.iter().any(|p| !p.same_grid(full)) {
        return Err(Error::shape("sub-volumes must share the grid of the full volume"));
    }
    poses
        .par_iter()
        .enumerate()
        .map(|(view, pose)| {
            let input = render_drr(full, pose, step_mm)?;
            let targets = parts
                .iter()
                .enumerate()
                .map(|(i, part)| {
                    let mut img = render_drr(part, pose, step_mm)?;
                    img.label = Label::Component(i);
                    Ok(img)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DecompositionSample {
                phantom: phantom.to_string(),
                view,
                input,
                targets,
            })
        })
        .collect()
}

/// One sample per pose: the projection of `v` and those of its clipped slabs.
pub fn render_dataset(
    phantom: &str,
    v: &Volume,
    plan: &ClipPlan,
    poses: &[CameraPose],
    step_mm: f64,
) -> Result<Vec<DecompositionSample>> {
    let parts = clip_volume(v, plan)?;
    render_samples(phantom, v, &parts, poses, step_mm)
}

/// Largest `|Σ targets − input|` over pixels, relative to the input's peak.
pub fn additivity_error(sample: &DecompositionSample) -> f64 {
    let peak = sample.input.max().max(f32::MIN_POSITIVE) as f64;
    let mut worst = 0.0f64;
    for (p, &x) in sample.input.data.iter().enumerate() {
        let s: f64 = sample.targets.iter().map(|t| t.data[p] as f64).sum();
        worst = worst.max((s - x as f64).abs());
    }
    worst / peak
}

/// Camera and sampling settings for a rendering run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub intrinsics: CameraIntrinsics,
    pub cranial_range: (f64, f64),
    pub lao_rao_range: (f64, f64),
    pub n_cranial: usize,
    pub n_lateral: usize,
    #[serde(default)]
    pub step_mm: Option<f64>,
}

impl TrajectoryConfig {
    /// 45 views at 64×64: cranial 0–20° by LAO/RAO ±40°.
    pub fn desk() -> TrajectoryConfig {
        TrajectoryConfig {
            intrinsics: CameraIntrinsics::desk(),
            cranial_range: (0.0, 20.0),
            lao_rao_range: (-40.0, 40.0),
            n_cranial: 5,
            n_lateral: 9,
            step_mm: None,
        }
    }

    /// 21×57 = 1197 views at 256×256.
    pub fn full() -> TrajectoryConfig {
        TrajectoryConfig {
            intrinsics: CameraIntrinsics::full(),
            cranial_range: (0.0, 20.0),
            lao_rao_range: (-40.0, 40.0),
            n_cranial: 21,
            n_lateral: 57,
            step_mm: None,
        }
    }

    pub fn poses(&self) -> Result<Vec<CameraPose>> {
        generate_trajectory(
            &self.intrinsics,
            self.cranial_range,
            self.lao_rao_range,
            self.n_cranial,
            self.n_lateral,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
    }

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    /// Rodrigues' formula, built independently of the elementary rotations.
    fn axis_angle(axis: Vec3, deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        let [x, y, z] = axis;
        let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
        let k2 = matmul(&k, &k);
        let mut r = IDENTITY;
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] += s * k[i][j] + (1.0 - c) * k2[i][j];
            }
        }
        r
    }

    #[test]
    fn zero_angles_give_identity() {
        let pose = pose_from_angles(&CameraIntrinsics::desk(), 0.0, 0.0);
        assert!(close(&pose.rotation, &IDENTITY, 0.0));
        pose.validate().unwrap();
    }

    #[test]
    fn opposite_lateral_angles_cancel() {
        let intr = CameraIntrinsics::desk();
        let a = pose_from_angles(&intr, 0.0, 40.0).rotation;
        let b = pose_from_angles(&intr, 0.0, -40.0).rotation;
        assert!(close(&matmul(&a, &b), &IDENTITY, 1e-6));
    }

    #[test]
    fn cranial_matches_axis_angle() {
        let pose = pose_from_angles(&CameraIntrinsics::desk(), 20.0, 0.0);
        assert!(close(&pose.rotation, &axis_angle([1.0, 0.0, 0.0], 20.0), 1e-12));
        let pose = pose_from_angles(&CameraIntrinsics::desk(), 0.0, -33.0);
        assert!(close(&pose.rotation, &axis_angle([0.0, 0.0, 1.0], -33.0), 1e-12));
    }

    #[test]
    fn trajectory_grid() {
        let intr = CameraIntrinsics::desk();
        let poses = generate_trajectory(&intr, (0.0, 20.0), (-40.0, 40.0), 5, 9).unwrap();
        assert_eq!(poses.len(), 45);
        assert_eq!((poses[0].cranial_deg, poses[0].lao_rao_deg), (0.0, -40.0));
        assert_eq!((poses[44].cranial_deg, poses[44].lao_rao_deg), (20.0, 40.0));
        // Cranial-major: second pose advances the lateral angle.
        assert_eq!((poses[1].cranial_deg, poses[1].lao_rao_deg), (0.0, -30.0));
        assert_eq!((poses[9].cranial_deg, poses[9].lao_rao_deg), (5.0, -40.0));

        let one = generate_trajectory(&intr, (3.0, 9.0), (-2.0, 5.0), 1, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].cranial_deg, one[0].lao_rao_deg), (3.0, -2.0));

        assert_eq!(TrajectoryConfig::full().poses().unwrap().len(), 1197);
        assert!(generate_trajectory(&intr, (1.0, 0.0), (0.0, 0.0), 2, 2).is_err());
        assert!(generate_trajectory(&intr, (0.0, 1.0), (0.0, 0.0), 0, 2).is_err());
    }

    #[test]
    fn central_ray_hits_isocenter() {
        let pose = pose_from_angles(&CameraIntrinsics::square(2), 0.0, 0.0);
        let s = pose.source();
        assert_eq!(s, [0.0, -800.0, 0.0]);
        let p = pose.pixel_center(1, 1);
        assert!((p[1] - 400.0).abs() < 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        let mut intr = CameraIntrinsics::desk();
        intr.source_to_detector_mm = 500.0;
        assert!(intr.validate().is_err());
        let mut intr = CameraIntrinsics::desk();
        intr.pixel_pitch_mm = -1.0;
        assert!(intr.validate().is_err());
    }

    #[test]
    fn bad_step_and_pose_rejected() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let mut pose = pose_from_angles(&CameraIntrinsics::square(4), 0.0, 0.0);
        assert!(render_drr(&v, &pose, 0.0).is_err());
        pose.rotation[0][0] = 2.0;
        assert!(matches!(render_drr(&v, &pose, 1.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn ray_box_clipping() {
        let (lo, hi) = ([0.0; 3], [1.0; 3]);
        let r = clip_ray_to_box([-1.0, 0.5, 0.5], [3.0, 0.0, 0.0], lo, hi).unwrap();
        assert!((r.0 - 1.0 / 3.0).abs() < 1e-15 && (r.1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(clip_ray_to_box([-1.0, 2.0, 0.5], [1.0, 0.0, 0.0], lo, hi).is_none());
    }
}
