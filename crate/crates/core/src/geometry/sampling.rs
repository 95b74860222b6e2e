use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, Result, TriMesh, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area-uniform surface samples with face normals. The returned faces
/// record which triangle each sample came from.
pub fn sample_surface_with_faces(mesh: &TriMesh, count: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    if count == 0 {
        return Err(GeometryError::InvalidParams("sample count must be at least 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::ZeroExtent);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.random::<f64>() * total;
        let f = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.triangle(f);
        let s = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        points.push(p);
        // zero-area faces are never selected: their cumulative step is empty
        normals.push(mesh.face_normal(f).unwrap_or_else(Vec3::zeros));
        faces.push(f);
    }
    Ok((
        PointCloud {
            points,
            normals: Some(normals),
        },
        faces,
    ))
}

/// Area-uniform surface samples: face chosen proportional to area, then a
/// uniform barycentric point; normals are the face normals.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Result<PointCloud> {
    Ok(sample_surface_with_faces(mesh, count, seed)?.0)
}
