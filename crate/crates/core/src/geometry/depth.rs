use rayon::prelude::*;

use super::{Bvh, GeometryError, PointCloud, Result, TriMesh, Vec3};

/// Orthographic depth render of `mesh` along `view_direction` (the direction
/// rays travel), returning the nearest surface point of every pixel that hits.
///
/// The image plane is perpendicular to the view direction, centered at the
/// origin and spans `[-0.5, 0.5]^2` so one pixel is `1 / image_res` wide.
pub fn depth_cull(mesh: &TriMesh, view_direction: Vec3, image_res: usize) -> Result<PointCloud> {
    let dir = view_direction
        .try_normalize(1e-12)
        .ok_or_else(|| GeometryError::InvalidParams("view direction must be nonzero".into()))?;
    if image_res == 0 {
        return Err(GeometryError::InvalidParams("image resolution must be positive".into()));
    }
    let (u, w) = image_basis(&dir);
    let bvh = Bvh::new(mesh);
    let pixel = |i: usize| -0.5 + (i as f64 + 0.5) / image_res as f64;
    let hits: Vec<Option<(Vec3, Vec3)>> = (0..image_res * image_res)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k % image_res, k / image_res);
            let origin = u * pixel(i) + w * pixel(j) - dir * 2.0;
            bvh.nearest_hit(&origin, &dir).map(|h| {
                let p = origin + dir * h.t;
                (p, mesh.face_normal(h.face).unwrap_or_else(Vec3::zeros))
            })
        })
        .collect();
    let (points, normals) = hits.into_iter().flatten().unzip();
    Ok(PointCloud {
        points,
        normals: Some(normals),
    })
}

/// Orthonormal image axes perpendicular to `dir`.
fn image_basis(dir: &Vec3) -> (Vec3, Vec3) {
    let helper = match dir.iamin() {
        0 => Vec3::x(),
        1 => Vec3::y(),
        _ => Vec3::z(),
    };
    let u = (helper - dir * helper.dot(dir)).normalize();
    let w = dir.cross(&u);
    (u, w)
}
