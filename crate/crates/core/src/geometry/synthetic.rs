//! Procedural watertight shapes that stand in for scanned datasets.
//!
//! Spheres and boxes are tessellated directly. `union2` and
//! `capsule_figure` are defined as signed distance functions and meshed
//! with marching cubes on a cell-center grid over the canonical cube,
//! which guarantees a closed, consistently oriented surface as long as
//! the shape stays clear of the cube boundary.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, Result, Transform, TriMesh, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Union2,
    CapsuleFigure,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Union2,
        ShapeKind::CapsuleFigure,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Union2 => "union2",
            ShapeKind::CapsuleFigure => "capsule_figure",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::InvalidParams(format!("unknown shape kind {s:?}")))
    }
}

/// Shape parameters. `None` fields are drawn from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    /// Sphere radius, in `(0, 0.5)`.
    pub radius: Option<f64>,
    /// Icosphere subdivision level.
    pub subdivisions: u32,
    /// Box half extents, each in `(0, 0.5]`.
    pub half_extents: Option<Vec3>,
    /// Longest bounding-box edge of `union2` and `capsule_figure` outputs.
    pub extent: f64,
    /// Per limb (left arm, right arm, left leg, right leg): abduction and
    /// flexion angles in radians, each within `[-pi/2, pi/2]`.
    pub limb_angles: Option<[[f64; 2]; 4]>,
    pub torso_radius: f64,
    pub limb_radius: f64,
    /// Sampling resolution of the distance field for meshed kinds.
    pub mesh_resolution: usize,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            radius: None,
            subdivisions: 4,
            half_extents: None,
            extent: 0.85,
            limb_angles: None,
            torso_radius: 0.12,
            limb_radius: 0.06,
            mesh_resolution: 64,
        }
    }
}

/// Line segment swept by a ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn closest_on_axis(&self, p: &Vec3) -> Vec3 {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        self.a + ab * t
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        (p - self.closest_on_axis(p)).norm() - self.radius
    }

    pub fn transformed(&self, t: &Transform) -> Capsule {
        Capsule {
            a: t.apply(&self.a),
            b: t.apply(&self.b),
            radius: self.radius * t.scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticShape {
    pub kind: ShapeKind,
    pub mesh: TriMesh,
    /// For `capsule_figure`: torso followed by left arm, right arm, left
    /// leg, right leg, in output coordinates. Empty otherwise.
    pub skeleton: Vec<Capsule>,
}

/// Generates a watertight shape centered in the canonical cube.
pub fn gen_synthetic(kind: ShapeKind, params: &ShapeParams, seed: u64) -> Result<SyntheticShape> {
    validate(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mesh, skeleton) = match kind {
        ShapeKind::Sphere => {
            let r = params.radius.unwrap_or_else(|| rng.random_range(0.25..0.45));
            (icosphere(r, params.subdivisions), Vec::new())
        }
        ShapeKind::Box => {
            let h = params.half_extents.unwrap_or_else(|| {
                Vec3::new(
                    rng.random_range(0.15..0.42),
                    rng.random_range(0.15..0.42),
                    rng.random_range(0.15..0.42),
                )
            });
            (box_mesh(h), Vec::new())
        }
        ShapeKind::Union2 => (union2(params, &mut rng)?, Vec::new()),
        ShapeKind::CapsuleFigure => capsule_figure(params, &mut rng)?,
    };
    mesh.require_watertight()?;
    Ok(SyntheticShape { kind, mesh, skeleton })
}

fn validate(p: &ShapeParams) -> Result<()> {
    let bad = |m: String| Err(GeometryError::InvalidParams(m));
    if let Some(r) = p.radius {
        if !(r > 0.0 && r < 0.5) {
            return bad(format!("sphere radius {r} outside (0, 0.5)"));
        }
    }
    if let Some(h) = p.half_extents {
        if !h.iter().all(|&c| c > 0.0 && c <= 0.5) {
            return bad(format!("box half extents {h:?} outside (0, 0.5]"));
        }
    }
    if !(p.extent > 0.0 && p.extent <= 1.0) {
        return bad(format!("extent {} outside (0, 1]", p.extent));
    }
    if let Some(angles) = p.limb_angles {
        if angles.iter().flatten().any(|a| a.abs() > FRAC_PI_2 + 1e-12) {
            return bad("limb angles must lie within +-90 degrees".into());
        }
    }
    if !(p.torso_radius > 0.0 && p.limb_radius > 0.0) {
        return bad("capsule radii must be positive".into());
    }
    if p.mesh_resolution < 8 {
        return bad(format!("mesh resolution {} < 8", p.mesh_resolution));
    }
    if p.subdivisions > 7 {
        return bad(format!("subdivision level {} > 7", p.subdivisions));
    }
    Ok(())
}

/// Subdivided icosahedron with all vertices at distance `radius`.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh {
        vertices: verts.into_iter().map(|v| v * radius).collect(),
        faces,
    }
}

/// Axis-aligned box centered at the origin, 12 outward-facing triangles.
pub fn box_mesh(half: Vec3) -> TriMesh {
    let vertices = (0..8)
        .map(|i| {
            Vec3::new(
                if i & 1 != 0 { half.x } else { -half.x },
                if i & 2 != 0 { half.y } else { -half.y },
                if i & 4 != 0 { half.z } else { -half.z },
            )
        })
        .collect();
    // corners indexed by bits (x, y, z)
    let faces = vec![
        [0, 4, 6],
        [0, 6, 2], // -x
        [1, 3, 7],
        [1, 7, 5], // +x
        [0, 1, 5],
        [0, 5, 4], // -y
        [2, 6, 7],
        [2, 7, 3], // +y
        [0, 2, 3],
        [0, 3, 1], // -z
        [4, 5, 7],
        [4, 7, 6], // +z
    ];
    TriMesh { vertices, faces }
}

/// Convex capsule tessellation: a surface of revolution with `segments`
/// around the axis and `rings` latitude steps per hemisphere.
pub fn capsule_mesh(capsule: &Capsule, segments: usize, rings: usize) -> TriMesh {
    let axis = capsule.b - capsule.a;
    let len = axis.norm();
    let dir = if len > 0.0 { axis / len } else { Vec3::z() };
    let helper = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = dir.cross(&helper).normalize();
    let w = dir.cross(&u);
    let r = capsule.radius;
    // profile from the pole at `b` down to the pole at `a`: (ring radius, height)
    let mut profile = Vec::new();
    for i in 1..=rings {
        let phi = i as f64 / rings as f64 * FRAC_PI_2;
        profile.push((r * phi.sin(), len + r * phi.cos()));
    }
    for i in 0..rings {
        let phi = i as f64 / rings as f64 * FRAC_PI_2;
        profile.push((r * phi.cos(), -r * phi.sin()));
    }
    let mut vertices = vec![capsule.a + dir * (len + r)];
    for &(rad, h) in &profile {
        for s in 0..segments {
            let theta = 2.0 * PI * s as f64 / segments as f64;
            vertices.push(capsule.a + dir * h + (u * theta.cos() + w * theta.sin()) * rad);
        }
    }
    let bottom = vertices.len();
    vertices.push(capsule.a - dir * r);
    let ring = |k: usize, s: usize| 1 + k * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s), ring(0, s + 1)]);
    }
    for k in 0..profile.len() - 1 {
        for s in 0..segments {
            let (a, b) = (ring(k, s), ring(k, s + 1));
            let (c, d) = (ring(k + 1, s), ring(k + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    let last = profile.len() - 1;
    for s in 0..segments {
        faces.push([bottom, ring(last, s + 1), ring(last, s)]);
    }
    TriMesh { vertices, faces }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
}

impl Primitive {
    fn sdf(&self, p: &Vec3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => (p - center).norm() - radius,
            Primitive::Box { center, half } => {
                let q = (p - center).abs() - half;
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Primitive::Sphere { center, radius } => (center - Vec3::repeat(radius), center + Vec3::repeat(radius)),
            Primitive::Box { center, half } => (center - half, center + half),
        }
    }

    fn transformed(&self, t: &Transform) -> Primitive {
        match *self {
            Primitive::Sphere { center, radius } => Primitive::Sphere {
                center: t.apply(&center),
                radius: radius * t.scale,
            },
            Primitive::Box { center, half } => Primitive::Box {
                center: t.apply(&center),
                half: half * t.scale,
            },
        }
    }
}

fn random_primitive(rng: &mut ChaCha8Rng, center: Vec3) -> Primitive {
    if rng.random_bool(0.5) {
        Primitive::Sphere {
            center,
            radius: rng.random_range(0.15..0.3),
        }
    } else {
        Primitive::Box {
            center,
            half: Vec3::new(
                rng.random_range(0.1..0.25),
                rng.random_range(0.1..0.25),
                rng.random_range(0.1..0.25),
            ),
        }
    }
}

/// Transform mapping the box `[lo, hi]` to a centered box whose longest
/// edge is `extent`.
fn fit_transform(lo: Vec3, hi: Vec3, extent: f64) -> Result<Transform> {
    let size = (hi - lo).max();
    if size <= 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let scale = extent / size;
    Transform::new(scale, -(lo + hi) * 0.5 * scale)
}

/// Meshes `{p : sdf(p) <= 0}` and snaps the result's bounding box to the
/// requested extent. Returns the mesh and the snapping transform.
fn mesh_sdf(sdf: impl Fn(&Vec3) -> f64 + Sync, resolution: usize, extent: f64) -> Result<(TriMesh, Transform)> {
    let centers = super::grid_centers(resolution);
    let values: Vec<f64> = centers.iter().map(|p| -sdf(p)).collect();
    let mesh = crate::mesher::extract_isosurface(&values, resolution, 0.0);
    let (lo, hi) = mesh.bounding_box().ok_or(GeometryError::EmptyMesh)?;
    let snap = fit_transform(lo, hi, extent)?;
    Ok((mesh.transformed(&snap), snap))
}

fn union2(params: &ShapeParams, rng: &mut ChaCha8Rng) -> Result<TriMesh> {
    let a = random_primitive(rng, Vec3::zeros());
    let theta = rng.random_range(0.0..2.0 * PI);
    let z: f64 = rng.random_range(-1.0..1.0);
    let dir = Vec3::new(
        (1.0 - z * z).sqrt() * theta.cos(),
        (1.0 - z * z).sqrt() * theta.sin(),
        z,
    );
    let offset = rng.random_range(0.15..0.3);
    let b = random_primitive(rng, dir * offset);
    let (lo_a, hi_a) = a.bounds();
    let (lo_b, hi_b) = b.bounds();
    let fit = fit_transform(lo_a.inf(&lo_b), hi_a.sup(&hi_b), params.extent)?;
    let (a, b) = (a.transformed(&fit), b.transformed(&fit));
    Ok(mesh_sdf(|p| a.sdf(p).min(b.sdf(p)), params.mesh_resolution, params.extent)?.0)
}

/// Torso along +y plus four single-segment limbs. Left limbs sit at +x;
/// right limbs mirror them, so zero angles give a figure symmetric about
/// `x = 0`.
fn capsule_figure(params: &ShapeParams, rng: &mut ChaCha8Rng) -> Result<(TriMesh, Vec<Capsule>)> {
    let angles = params.limb_angles.unwrap_or_else(|| {
        let mut a = [[0.0; 2]; 4];
        for limb in &mut a {
            limb[0] = rng.random_range(-PI / 3.0..PI / 3.0);
            limb[1] = rng.random_range(-PI / 4.0..PI / 4.0);
        }
        a
    });
    let (tr, lr) = (params.torso_radius, params.limb_radius);
    let torso = Capsule {
        a: Vec3::new(0.0, -0.25, 0.0),
        b: Vec3::new(0.0, 0.25, 0.0),
        radius: tr,
    };
    // (joint for the +x side, rest angle from straight down, length)
    let limbs = [
        (Vec3::new(tr + 0.02, 0.22, 0.0), 0.5, 0.4),
        (Vec3::new(tr * 0.6, -0.28, 0.0), 0.15, 0.45),
    ];
    let mut skeleton = vec![torso];
    for (li, &(joint, rest, length)) in limbs.iter().enumerate() {
        for side in [1.0, -1.0] {
            let idx = li * 2 + (side < 0.0) as usize;
            let [abduction, flexion] = angles[idx];
            let a = rest + abduction;
            let d = Vec3::new(side * a.sin() * flexion.cos(), -a.cos() * flexion.cos(), flexion.sin());
            let j = Vec3::new(side * joint.x, joint.y, joint.z);
            skeleton.push(Capsule {
                a: j,
                b: j + d * length,
                radius: lr,
            });
        }
    }
    let (lo, hi) = skeleton.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), c| {
            let r = Vec3::repeat(c.radius);
            (lo.inf(&(c.a - r)).inf(&(c.b - r)), hi.sup(&(c.a + r)).sup(&(c.b + r)))
        },
    );
    let fit = fit_transform(lo, hi, params.extent)?;
    let skeleton: Vec<Capsule> = skeleton.iter().map(|c| c.transformed(&fit)).collect();
    let sdf = |p: &Vec3| skeleton.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min);
    let (mesh, snap) = mesh_sdf(sdf, params.mesh_resolution, params.extent)?;
    let skeleton = skeleton.iter().map(|c| c.transformed(&snap)).collect();
    Ok((mesh, skeleton))
}
