//! Procedural thorax-like phantoms: a body ellipsoid holding a spine
//! cylinder, a ribcage of torus arcs and a branching vessel tree.
//!
//! World axes: x is patient lateral, y is anterior-posterior (anterior at
//! negative y), z is longitudinal (head at positive z).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{validate_grid, Vec3, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub center: Vec3,
    pub radii: Vec3,
    pub attenuation: f64,
}

/// Cylinder parallel to the z axis, running through the whole body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpineSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub attenuation: f64,
}

/// `count` ribs, each a circular torus arc in a transverse plane.
/// Angles are measured in the xy plane from +x towards +y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RibSpec {
    pub count: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub major_radius: f64,
    pub minor_radius: f64,
    pub arc_start_deg: f64,
    pub arc_end_deg: f64,
    pub top_z: f64,
    pub pitch: f64,
    /// Uniform jitter (mm) applied to each rib's height, drawn from the seed.
    pub jitter: f64,
    pub attenuation: f64,
}

/// Binary tree of tubes grown from `root` along `direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselSpec {
    pub root: Vec3,
    pub direction: Vec3,
    pub length: f64,
    pub radius: f64,
    pub branch_depth: usize,
    pub radius_decay: f64,
    pub length_decay: f64,
    pub spread_deg: f64,
    pub attenuation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub body: BodySpec,
    pub spine: SpineSpec,
    pub ribs: RibSpec,
    pub vessels: VesselSpec,
}

impl PhantomSpec {
    /// A thorax-like phantom sized for a 320 mm field of view. Geometry
    /// varies with `seed` so that distinct seeds act as distinct subjects.
    pub fn thorax(seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7468_6f72_6178);
        let mut jitter = |scale: f64| 1.0 + scale * (rng.random::<f64>() * 2.0 - 1.0);
        let radii = [135.0 * jitter(0.08), 95.0 * jitter(0.08), 140.0 * jitter(0.05)];
        let spine_y = radii[1] * 0.62;
        let rib_count = 8 + (seed % 3) as usize;
        PhantomSpec {
            seed,
            body: BodySpec {
                center: [0.0, 0.0, 0.0],
                radii,
                attenuation: 0.018 * jitter(0.1),
            },
            spine: SpineSpec {
                center_x: 0.0,
                center_y: spine_y,
                radius: 18.0 * jitter(0.1),
                attenuation: 0.035 * jitter(0.1),
            },
            ribs: RibSpec {
                count: rib_count,
                center_x: 0.0,
                center_y: 8.0,
                major_radius: radii[1] * 0.8,
                minor_radius: 5.0 * jitter(0.15),
                arc_start_deg: -55.0,
                arc_end_deg: 235.0,
                top_z: radii[2] * 0.7,
                pitch: radii[2] * 1.3 / rib_count as f64,
                jitter: 4.0,
                attenuation: 0.04 * jitter(0.1),
            },
            vessels: VesselSpec {
                root: [6.0, 0.0, radii[2] * 0.75],
                direction: [0.0, 0.0, -1.0],
                length: 70.0 * jitter(0.1),
                radius: 11.0 * jitter(0.1),
                branch_depth: 3 + (seed % 2) as usize,
                radius_decay: 0.7,
                length_decay: 0.75,
                spread_deg: 35.0 * jitter(0.2),
                attenuation: 0.012 * jitter(0.1),
            },
        }
    }

    /// Copy of the spec with the given per-component attenuations.
    pub fn with_attenuations(&self, body: f64, spine: f64, ribs: f64, vessels: f64) -> PhantomSpec {
        let mut s = self.clone();
        s.body.attenuation = body;
        s.spine.attenuation = spine;
        s.ribs.attenuation = ribs;
        s.vessels.attenuation = vessels;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let atten = [
            ("body", self.body.attenuation),
            ("spine", self.spine.attenuation),
            ("ribs", self.ribs.attenuation),
            ("vessels", self.vessels.attenuation),
        ];
        for (name, mu) in atten {
            if !mu.is_finite() || mu < 0.0 {
                return Err(Error::param(format!("{name} attenuation must be finite and >= 0")));
            }
        }
        let positive = [
            ("body radius", self.body.radii.iter().cloned().fold(f64::INFINITY, f64::min)),
            ("spine radius", self.spine.radius),
            ("rib major radius", self.ribs.major_radius),
            ("rib minor radius", self.ribs.minor_radius),
            ("vessel radius", self.vessels.radius),
            ("vessel length", self.vessels.length),
        ];
        for (name, x) in positive {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::param(format!("{name} must be finite and > 0")));
            }
        }
        if self.ribs.count > 64 {
            return Err(Error::param("at most 64 ribs are supported"));
        }
        if self.vessels.branch_depth > 10 {
            return Err(Error::param("vessel branch depth must be <= 10"));
        }
        if !(self.vessels.radius_decay > 0.0 && self.vessels.radius_decay <= 1.0)
            || !(self.vessels.length_decay > 0.0 && self.vessels.length_decay <= 1.0)
        {
            return Err(Error::param("vessel decay factors must lie in (0, 1]"));
        }
        let d = self.vessels.direction;
        if !(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > 0.0) {
            return Err(Error::param("vessel direction must be non-zero"));
        }
        let spine_center = [self.spine.center_x, self.spine.center_y, self.body.center[2]];
        if !self.body_contains(spine_center) {
            return Err(Error::param("spine axis lies outside the body ellipsoid"));
        }
        if !self.body_contains(self.vessels.root) {
            return Err(Error::param("vessel root lies outside the body ellipsoid"));
        }
        if !self.body_contains([self.ribs.center_x, self.ribs.center_y, self.body.center[2]]) {
            return Err(Error::param("rib center lies outside the body ellipsoid"));
        }
        Ok(())
    }

    fn body_contains(&self, p: Vec3) -> bool {
        let mut r = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.body.center[a]) / self.body.radii[a];
            r += t * t;
        }
        r <= 1.0
    }
}

struct Capsule {
    a: Vec3,
    b: Vec3,
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: Vec3) -> bool {
        let ab = sub(self.b, self.a);
        let ap = sub(p, self.a);
        let t = (dot(ap, ab) / dot(ab, ab)).clamp(0.0, 1.0);
        let c = [self.a[0] + t * ab[0], self.a[1] + t * ab[1], self.a[2] + t * ab[2]];
        let d = sub(p, c);
        dot(d, d) <= self.radius * self.radius
    }
}

struct RibArc {
    z: f64,
}

struct Geometry<'a> {
    spec: &'a PhantomSpec,
    ribs: Vec<RibArc>,
    vessels: Vec<Capsule>,
}

impl<'a> Geometry<'a> {
    fn build(spec: &'a PhantomSpec) -> Geometry<'a> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let ribs = (0..spec.ribs.count)
            .map(|k| {
                let j = spec.ribs.jitter * (rng.random::<f64>() * 2.0 - 1.0);
                RibArc {
                    z: spec.ribs.top_z - k as f64 * spec.ribs.pitch + j,
                }
            })
            .collect();
        let mut vessels = Vec::new();
        let v = &spec.vessels;
        grow_vessels(
            &mut rng,
            &mut vessels,
            v.root,
            normalize(v.direction),
            v.length,
            v.radius,
            v.branch_depth,
            v,
        );
        Geometry { spec, ribs, vessels }
    }

    fn value(&self, p: Vec3) -> f64 {
        let s = self.spec;
        if !s.body_contains(p) {
            return 0.0;
        }
        let mut mu = s.body.attenuation;

        let dx = p[0] - s.spine.center_x;
        let dy = p[1] - s.spine.center_y;
        if dx * dx + dy * dy <= s.spine.radius * s.spine.radius {
            mu += s.spine.attenuation;
        }

        if self.ribs.iter().any(|rib| self.in_rib(rib, p)) {
            mu += s.ribs.attenuation;
        }

        if self.vessels.iter().any(|c| c.contains(p)) {
            mu += s.vessels.attenuation;
        }
        mu
    }

    fn in_rib(&self, rib: &RibArc, p: Vec3) -> bool {
        let r = &self.spec.ribs;
        let dz = p[2] - rib.z;
        if dz.abs() > r.minor_radius {
            return false;
        }
        let x = p[0] - r.center_x;
        let y = p[1] - r.center_y;
        let start = r.arc_start_deg.to_radians();
        let end = r.arc_end_deg.to_radians();
        let mut phi = y.atan2(x);
        while phi < start {
            phi += std::f64::consts::TAU;
        }
        let dist2 = if phi <= end {
            let rho = (x * x + y * y).sqrt();
            (rho - r.major_radius).powi(2) + dz * dz
        } else {
            let ends = [start, end].map(|a| {
                let ex = r.major_radius * a.cos() - x;
                let ey = r.major_radius * a.sin() - y;
                ex * ex + ey * ey + dz * dz
            });
            ends[0].min(ends[1])
        };
        dist2 <= r.minor_radius * r.minor_radius
    }
}

#[allow(clippy::too_many_arguments)]
fn grow_vessels(
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Capsule>,
    start: Vec3,
    dir: Vec3,
    length: f64,
    radius: f64,
    depth: usize,
    spec: &VesselSpec,
) {
    let end = [
        start[0] + dir[0] * length,
        start[1] + dir[1] * length,
        start[2] + dir[2] * length,
    ];
    out.push(Capsule {
        a: start,
        b: end,
        radius,
    });
    if depth == 0 {
        return;
    }
    // Children diverge symmetrically about a random axis perpendicular to `dir`.
    let helper = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(dir, helper));
    let w = cross(dir, u);
    let twist = rng.random::<f64>() * std::f64::consts::TAU;
    let axis = [
        u[0] * twist.cos() + w[0] * twist.sin(),
        u[1] * twist.cos() + w[1] * twist.sin(),
        u[2] * twist.cos() + w[2] * twist.sin(),
    ];
    let spread = spec.spread_deg.to_radians() * (0.75 + 0.5 * rng.random::<f64>());
    for sign in [1.0, -1.0] {
        let child = normalize([
            dir[0] * spread.cos() + sign * axis[0] * spread.sin(),
            dir[1] * spread.cos() + sign * axis[1] * spread.sin(),
            dir[2] * spread.cos() + sign * axis[2] * spread.sin(),
        ]);
        grow_vessels(
            rng,
            out,
            end,
            child,
            length * spec.length_decay,
            radius * spec.radius_decay,
            depth - 1,
            spec,
        );
    }
}

/// Rasterizes `spec` onto a centered grid. Deterministic for a fixed
/// `(spec, dims, spacing)` regardless of thread count.
pub fn make_phantom(spec: &PhantomSpec, dims: [usize; 3], spacing: [f32; 3]) -> Result<Volume> {
    validate_grid(dims, spacing)?;
    if dims.iter().any(|&n| n < 16) {
        return Err(Error::param(format!("phantom dims must be >= 16, got {dims:?}")));
    }
    spec.validate()?;
    let geometry = Geometry::build(spec);
    let origin = Volume::centered_origin(dims, spacing);
    let [nx, ny, nz] = dims;
    let slice = nx * ny;
    let mut data = vec![0.0f32; slice * nz];
    data.par_chunks_mut(slice).enumerate().for_each(|(k, plane)| {
        let z = origin[2] as f64 + k as f64 * spacing[2] as f64;
        for j in 0..ny {
            let y = origin[1] as f64 + j as f64 * spacing[1] as f64;
            for i in 0..nx {
                let x = origin[0] as f64 + i as f64 * spacing[0] as f64;
                plane[i + nx * j] = geometry.value([x, y, z]) as f32;
            }
        }
    });
    Volume::new(dims, spacing, origin, data)
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
