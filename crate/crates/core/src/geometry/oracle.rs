use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Bvh, GeometryError, Result, TriMesh, Vec3};

/// Hits closer than this (in barycentric measure) to an edge or vertex are
/// treated as ambiguous and the ray is re-cast.
const EDGE_TOLERANCE: f64 = 1e-9;
const MAX_RETRIES: u32 = 8;
const JITTER: f64 = 0.3;

/// Inside/outside classifier for a watertight mesh using crossing parity
/// along three jittered, roughly axis-aligned rays with majority vote.
pub struct OccupancyOracle {
    bvh: Bvh,
}

impl OccupancyOracle {
    /// Fails fast with a closedness diagnostic if the mesh is not watertight.
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        mesh.require_watertight()?;
        Ok(Self { bvh: Bvh::new(mesh) })
    }

    /// Labels for many points; parallel, with output independent of the
    /// thread count.
    pub fn classify(&self, points: &[Vec3]) -> Result<Vec<bool>> {
        points
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.is_inside(i, p))
            .collect()
    }

    /// `index` seeds the jitter so results do not depend on evaluation order.
    pub fn is_inside(&self, index: usize, p: &Vec3) -> Result<bool> {
        let mut votes = 0;
        for axis in 0..3 {
            if self.cast(index, axis, p)? {
                votes += 1;
            }
        }
        Ok(votes >= 2)
    }

    fn cast(&self, index: usize, axis: usize, p: &Vec3) -> Result<bool> {
        for attempt in 0..=MAX_RETRIES {
            let seed =
                (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((axis as u64) << 56) ^ ((attempt as u64) << 60);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dir = Vec3::zeros();
            dir[axis] = 1.0;
            for other in (0..3).filter(|&a| a != axis) {
                dir[other] = rng.random_range(-JITTER..JITTER);
            }
            let mut crossings = 0usize;
            let mut ambiguous = false;
            self.bvh.for_each_hit(p, &dir, |hit| {
                if hit.bary.iter().any(|&b| b < EDGE_TOLERANCE) {
                    ambiguous = true;
                }
                crossings += 1;
            });
            if !ambiguous {
                return Ok(crossings % 2 == 1);
            }
        }
        Err(GeometryError::RetryExhausted { point_index: index })
    }
}

/// Binary occupancy labels (`true` = inside) for `points`.
pub fn occupancy_oracle(mesh: &TriMesh, points: &[Vec3]) -> Result<Vec<bool>> {
    OccupancyOracle::new(mesh)?.classify(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic::{box_mesh, icosphere};

    #[test]
    fn sphere_center_inside_outside_radius() {
        let m = icosphere(0.4, 4);
        let l = occupancy_oracle(&m, &[Vec3::zeros(), Vec3::new(0.45, 0.0, 0.0)]).unwrap();
        assert_eq!(l, vec![true, false]);
    }

    #[test]
    fn open_mesh_fails_fast() {
        let mut m = box_mesh(Vec3::repeat(0.3));
        m.faces.truncate(10);
        match occupancy_oracle(&m, &[Vec3::zeros()]) {
            Err(GeometryError::NotWatertight(r)) => assert!(r.boundary_edges > 0),
            other => panic!("expected watertightness error, got {other:?}"),
        }
    }

    #[test]
    fn box_edges_and_vertex_lines_are_handled() {
        // rays from points on the axes of a box hit its edges when unjittered
        let m = box_mesh(Vec3::repeat(0.25));
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(-0.4, 0.25, 0.25),
            Vec3::new(-0.4, 0.0, 0.0),
            Vec3::new(0.2, 0.2, 0.2),
        ];
        let l = occupancy_oracle(&m, &pts).unwrap();
        assert_eq!(l, vec![true, false, false, true]);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let m = icosphere(0.3, 3);
        let pts: Vec<Vec3> = (0..500)
            .map(|i| {
                let t = i as f64 * 0.37;
                Vec3::new(t.sin(), (1.3 * t).cos(), (0.7 * t).sin()) * 0.45
            })
            .collect();
        let a = occupancy_oracle(&m, &pts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| occupancy_oracle(&m, &pts).unwrap());
        assert_eq!(a, b);
    }
}
