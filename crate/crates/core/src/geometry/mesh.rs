use std::collections::HashMap;
use std::fmt;

use super::{GeometryError, Result, Vec3};

/// Indexed triangle surface.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Map from original to canonical coordinates: `q = scale * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub translation: Vec3,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            translation: Vec3::zeros(),
        }
    }

    pub fn new(scale: f64, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GeometryError::InvalidParams(format!(
                "transform scale must be positive, got {scale}"
            )));
        }
        Ok(Self { scale, translation })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.translation
    }

    pub fn apply_inverse(&self, q: &Vec3) -> Vec3 {
        (q - self.translation) / self.scale
    }

    pub fn inverse(&self) -> Self {
        Self {
            scale: 1.0 / self.scale,
            translation: -self.translation / self.scale,
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Transform) -> Self {
        Self {
            scale: self.scale * first.scale,
            translation: first.translation * self.scale + self.translation,
        }
    }
}

/// Result of the closedness check: counts of boundary (one adjacent face)
/// and non-manifold (more than two faces) edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClosednessReport {
    pub boundary_edges: usize,
    pub nonmanifold_edges: usize,
    pub example_edge: Option<(usize, usize)>,
}

impl ClosednessReport {
    pub fn is_closed(&self) -> bool {
        self.boundary_edges == 0 && self.nonmanifold_edges == 0
    }
}

impl fmt::Display for ClosednessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} boundary edges, {} non-manifold edges",
            self.boundary_edges, self.nonmanifold_edges
        )?;
        if let Some((a, b)) = self.example_edge {
            write!(f, " (e.g. edge {a}-{b})")?;
        }
        Ok(())
    }
}

impl TriMesh {
    /// Builds a mesh, checking every face index against the vertex count.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &index in f {
                if index >= n {
                    return Err(GeometryError::FaceIndex {
                        face: fi,
                        index,
                        vertex_count: n,
                    });
                }
            }
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::InvalidParams(format!("vertex {i} is not finite")));
        }
        Ok(Self { vertices, faces })
    }

    pub fn empty() -> Self {
        Self {
            vertices: Vec::new(),
            faces: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal (length = twice the area).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.face_cross(face).norm()
    }

    /// Unit face normal, or `None` for a zero-area face.
    pub fn face_normal(&self, face: usize) -> Option<Vec3> {
        let n = self.face_cross(face);
        let len = n.norm();
        (len > 0.0).then(|| n / len)
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive for outward-oriented closed meshes.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(
            self.vertices
                .iter()
                .fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))),
        )
    }

    /// Every undirected edge must border exactly two faces.
    pub fn closedness(&self) -> ClosednessReport {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut report = ClosednessReport {
            boundary_edges: 0,
            nonmanifold_edges: 0,
            example_edge: None,
        };
        let mut bad: Vec<(usize, usize)> = Vec::new();
        for (&edge, &count) in &counts {
            match count {
                2 => {}
                1 => {
                    report.boundary_edges += 1;
                    bad.push(edge);
                }
                _ => {
                    report.nonmanifold_edges += 1;
                    bad.push(edge);
                }
            }
        }
        report.example_edge = bad.into_iter().min();
        report
    }

    pub fn is_watertight(&self) -> bool {
        !self.faces.is_empty() && self.closedness().is_closed()
    }

    pub fn require_watertight(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let report = self.closedness();
        if report.is_closed() {
            Ok(())
        } else {
            Err(GeometryError::NotWatertight(report))
        }
    }

    /// Every directed edge appears once and its reverse appears once.
    pub fn is_consistently_oriented(&self) -> bool {
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.faces {
            for e in 0..3 {
                *directed.entry((f[e], f[(e + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Merges vertices closer than `tolerance` and drops faces that become
    /// degenerate (repeated index or zero area). Unreferenced vertices are
    /// kept so indices stay stable for callers that hold them.
    pub fn cleanup(&mut self, tolerance: f64) {
        let remap = merge_close_vertices(&self.vertices, tolerance);
        let mut vertices = Vec::new();
        let mut new_index = vec![usize::MAX; self.vertices.len()];
        for (i, &rep) in remap.iter().enumerate() {
            if rep == i {
                new_index[i] = vertices.len();
                vertices.push(self.vertices[i]);
            }
        }
        let faces: Vec<[usize; 3]> = self
            .faces
            .iter()
            .map(|f| f.map(|v| new_index[remap[v]]))
            .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
            .collect();
        self.vertices = vertices;
        self.faces = faces;
        self.faces.retain({
            let verts = &self.vertices;
            move |f| {
                let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
                (b - a).cross(&(c - a)).norm() > 0.0
            }
        });
    }

    pub fn transformed(&self, t: &Transform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| t.apply(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Mirror through the plane `axis = 0`, flipping winding so the result
    /// stays outward-oriented.
    pub fn reflected(&self, axis: usize) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    let mut w = *v;
                    w[axis] = -w[axis];
                    w
                })
                .collect(),
            faces: self.faces.iter().map(|&[a, b, c]| [a, c, b]).collect(),
        }
    }

    /// Concatenates several meshes into one (no welding).
    pub fn merged(parts: &[TriMesh]) -> TriMesh {
        let mut out = TriMesh::empty();
        for p in parts {
            let offset = out.vertices.len();
            out.vertices.extend_from_slice(&p.vertices);
            out.faces.extend(p.faces.iter().map(|f| f.map(|i| i + offset)));
        }
        out
    }
}

/// Union-find-free clustering on a hashed grid of cell size `tolerance`:
/// each vertex maps to the first earlier vertex within `tolerance`.
fn merge_close_vertices(vertices: &[Vec3], tolerance: f64) -> Vec<usize> {
    let key = |v: &Vec3| -> [i64; 3] { v.map(|c| (c / tolerance).floor() as i64).into() };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let mut remap = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let k = key(v);
        let mut found = None;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &j in list {
                            if (vertices[j] - v).norm() <= tolerance {
                                found = Some(j);
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        match found {
            Some(j) => remap.push(j),
            None => {
                buckets.entry(k).or_default().push(i);
                remap.push(i);
            }
        }
    }
    remap
}

/// Centers the bounding box at the origin and scales the longest edge to 1.
pub fn normalize(mesh: &TriMesh) -> Result<(TriMesh, Transform)> {
    let (lo, hi) = mesh.bounding_box().ok_or(GeometryError::EmptyMesh)?;
    let extent = (hi - lo).max();
    if extent <= 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let scale = 1.0 / extent;
    let center = (lo + hi) * 0.5;
    let transform = Transform::new(scale, -center * scale)?;
    Ok((mesh.transformed(&transform), transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic::box_mesh;

    fn cube(lo: f64, hi: f64) -> TriMesh {
        let h = (hi - lo) / 2.0;
        let c = (hi + lo) / 2.0;
        box_mesh(Vec3::new(h, h, h)).transformed(&Transform::new(1.0, Vec3::repeat(c)).unwrap())
    }

    #[test]
    fn normalize_cube_0_2() {
        let (m, t) = normalize(&cube(0.0, 2.0)).unwrap();
        assert_eq!(t.scale, 0.5);
        assert_eq!(t.translation, Vec3::repeat(-0.5));
        let (lo, hi) = m.bounding_box().unwrap();
        assert_eq!(lo, Vec3::repeat(-0.5));
        assert_eq!(hi, Vec3::repeat(0.5));
    }

    #[test]
    fn normalize_box_4_2_1() {
        let b =
            box_mesh(Vec3::new(2.0, 1.0, 0.5)).transformed(&Transform::new(1.0, Vec3::new(3.0, -1.0, 7.0)).unwrap());
        let (m, _) = normalize(&b).unwrap();
        let (lo, hi) = m.bounding_box().unwrap();
        let size = hi - lo;
        assert!((size - Vec3::new(1.0, 0.5, 0.25)).norm() < 1e-12);
        assert!(((lo + hi) * 0.5).norm() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let (m, _) = normalize(&cube(-3.0, 5.0)).unwrap();
        let (_, t) = normalize(&m).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn zero_extent_rejected() {
        let m = TriMesh::new(vec![Vec3::repeat(1.0); 3], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(normalize(&m), Err(GeometryError::ZeroExtent)));
        assert!(matches!(normalize(&TriMesh::empty()), Err(GeometryError::EmptyMesh)));
    }

    #[test]
    fn transform_inverse_and_compose() {
        let a = Transform::new(2.0, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let b = Transform::new(0.25, Vec3::new(-1.0, 0.0, 0.5)).unwrap();
        let p = Vec3::new(0.3, -0.7, 0.1);
        assert!((a.apply_inverse(&a.apply(&p)) - p).norm() < 1e-15);
        assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-15);
        assert!((b.compose(&a).apply(&p) - b.apply(&a.apply(&p))).norm() < 1e-15);
        assert!(Transform::new(0.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn closedness_detects_hole() {
        let mut m = cube(-0.5, 0.5);
        assert!(m.is_watertight());
        assert!(m.is_consistently_oriented());
        m.faces.pop();
        let r = m.closedness();
        assert_eq!(r.boundary_edges, 3);
        assert!(matches!(m.require_watertight(), Err(GeometryError::NotWatertight(_))));
    }

    #[test]
    fn cleanup_merges_duplicates_and_drops_degenerate() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1e-10, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        // second face collapses onto a line after merging 3 into 0
        let mut m = TriMesh::new(v, vec![[0, 1, 2], [3, 1, 4], [3, 0, 2]]).unwrap();
        m.cleanup(1e-9);
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn reflection_keeps_outward_orientation() {
        let m = cube(-0.2, 0.4);
        let r = m.reflected(2);
        assert!(r.signed_volume() > 0.0);
        assert!((r.signed_volume() - m.signed_volume()).abs() < 1e-12);
    }
}
