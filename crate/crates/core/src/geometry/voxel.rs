use std::fs;
use std::path::Path;

use super::{cell_center, grid_centers, occupancy_oracle, GeometryError, PointCloud, Result, TriMesh, Vec3};
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 4] = b"IFVX";
const VERSION: u32 = 1;

/// Binary occupancy grid over the canonical cube, x-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    resolution: usize,
    data: Vec<u8>,
}

impl VoxelGrid {
    pub fn zeros(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(GeometryError::InvalidParams(format!(
                "voxel resolution must be at least 2, got {resolution}"
            )));
        }
        Ok(Self {
            resolution,
            data: vec![0; resolution.pow(3)],
        })
    }

    pub fn from_data(resolution: usize, data: Vec<u8>) -> Result<Self> {
        let mut g = Self::zeros(resolution)?;
        if data.len() != g.data.len() {
            return Err(GeometryError::InvalidParams(format!(
                "expected {} voxels, got {}",
                g.data.len(),
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(GeometryError::InvalidParams("voxel values must be 0 or 1".into()));
        }
        g.data = data;
        Ok(g)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, occupied: bool) {
        let i = self.index(x, y, z);
        self.data[i] = occupied as u8;
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Cell containing `p`; points on internal cell faces go to the
    /// higher-index cell and points outside the cube are clamped in.
    pub fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        let n = self.resolution;
        p.map(|c| {
            let u = ((c + 0.5) * n as f64).floor();
            u.clamp(0.0, (n - 1) as f64) as usize
        })
        .into()
    }

    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let n = self.resolution;
        Vec3::new(cell_center(x, n), cell_center(y, n), cell_center(z, n))
    }

    /// Shift content by whole cells; cells shifted in from outside are empty.
    pub fn shifted(&self, shift: [i64; 3]) -> VoxelGrid {
        let n = self.resolution as i64;
        let mut out = VoxelGrid {
            resolution: self.resolution,
            data: vec![0; self.data.len()],
        };
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let (sx, sy, sz) = (x - shift[0], y - shift[1], z - shift[2]);
                    if (0..n).contains(&sx) && (0..n).contains(&sy) && (0..n).contains(&sz) {
                        let v = self.data[self.index(sx as usize, sy as usize, sz as usize)];
                        let i = out.index(x as usize, y as usize, z as usize);
                        out.data[i] = v;
                    }
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.resolution as u32);
        w.bytes(&self.data);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let n = r.u32()? as usize;
        if n < 2 {
            return Err(DecodeError::Invalid {
                offset: 8,
                message: format!("resolution {n} < 2"),
            }
            .into());
        }
        let start = r.offset();
        let data = r.take(n.pow(3))?.to_vec();
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(DecodeError::Invalid {
                offset: start + i,
                message: "voxel value must be 0 or 1".into(),
            }
            .into());
        }
        Ok(Self { resolution: n, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Marks every cell that contains at least one point.
pub fn voxelize_points(cloud: &PointCloud, resolution: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::zeros(resolution)?;
    for p in &cloud.points {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidParams(
                "point cloud contains a non-finite point".into(),
            ));
        }
        let [x, y, z] = grid.cell_of(p);
        grid.set(x, y, z, true);
    }
    Ok(grid)
}

/// Marks every cell whose center is inside the (watertight) mesh.
pub fn voxelize_mesh(mesh: &TriMesh, resolution: usize) -> Result<VoxelGrid> {
    let mut grid = VoxelGrid::zeros(resolution)?;
    let labels = occupancy_oracle(mesh, &grid_centers(resolution))?;
    for (cell, inside) in grid.data.iter_mut().zip(labels) {
        *cell = inside as u8;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic::{box_mesh, icosphere};

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud { points, normals: None }
    }

    #[test]
    fn origin_goes_to_higher_cell() {
        let g = voxelize_points(&cloud(vec![Vec3::zeros()]), 2).unwrap();
        assert_eq!(g.occupied_count(), 1);
        assert!(g.get(1, 1, 1));
    }

    #[test]
    fn boundary_points_are_clamped() {
        let g = voxelize_points(&cloud(vec![Vec3::repeat(0.5), Vec3::repeat(-0.5)]), 4).unwrap();
        assert!(g.get(3, 3, 3) && g.get(0, 0, 0));
        assert_eq!(g.occupied_count(), 2);
    }

    #[test]
    fn empty_cloud_all_zero() {
        let g = voxelize_points(&cloud(vec![]), 8).unwrap();
        assert_eq!(g.occupied_count(), 0);
    }

    #[test]
    fn sphere_cloud_matches_per_point_binning() {
        let n = 32;
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        let pts: Vec<Vec3> = (0..3000)
            .map(|_| {
                let z = 2.0 * next() - 1.0;
                let phi = 2.0 * std::f64::consts::PI * next();
                let r = (1.0 - z * z).sqrt();
                Vec3::new(r * phi.cos(), r * phi.sin(), z) * 0.4
            })
            .collect();
        let g = voxelize_points(&cloud(pts.clone()), n).unwrap();
        // brute force: independent floor-based binning into a set
        let mut set = std::collections::BTreeSet::new();
        for p in &pts {
            let idx: Vec<i64> = p
                .iter()
                .map(|&c| (((c + 0.5) * n as f64).floor() as i64).clamp(0, n as i64 - 1))
                .collect();
            set.insert((idx[0], idx[1], idx[2]));
        }
        assert_eq!(g.occupied_count(), set.len());
        for (x, y, z) in set {
            assert!(g.get(x as usize, y as usize, z as usize));
        }
    }

    #[test]
    fn full_domain_cube_fills_n2() {
        let g = voxelize_mesh(&box_mesh(Vec3::repeat(0.5)), 2).unwrap();
        assert_eq!(g.occupied_count(), 8);
    }

    #[test]
    fn tiny_mesh_inside_one_cell() {
        // box around (0.1,0.1,0.1), far from the N=4 cell center (0.125, ...)
        let b =
            box_mesh(Vec3::repeat(0.01)).transformed(&crate::geometry::Transform::new(1.0, Vec3::repeat(0.1)).unwrap());
        assert_eq!(voxelize_mesh(&b, 4).unwrap().occupied_count(), 0);
        let b = box_mesh(Vec3::repeat(0.01))
            .transformed(&crate::geometry::Transform::new(1.0, Vec3::repeat(0.125)).unwrap());
        let g = voxelize_mesh(&b, 4).unwrap();
        assert_eq!(g.occupied_count(), 1);
        assert!(g.get(2, 2, 2));
    }

    #[test]
    fn sphere_voxelization_matches_analytic() {
        let n = 32;
        let m = icosphere(0.4, 4);
        let g = voxelize_mesh(&m, n).unwrap();
        // inscribed radius of the tessellation bounds the ambiguous band
        let r_in = 0.4 * (1.0 - 2e-3);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let r = g.cell_center(x, y, z).norm();
                    if r < r_in - 1e-6 {
                        assert!(g.get(x, y, z));
                    } else if r > 0.4 + 1e-6 {
                        assert!(!g.get(x, y, z));
                    }
                }
            }
        }
    }

    #[test]
    fn bytes_round_trip_and_errors() {
        let mut g = VoxelGrid::zeros(3).unwrap();
        g.set(1, 2, 0, true);
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..4], b"IFVX");
        assert_eq!(bytes.len(), 12 + 27);
        // x-fastest layout
        assert_eq!(bytes[12 + 1 + 3 * 2], 1);
        assert_eq!(VoxelGrid::from_bytes(&bytes).unwrap(), g);
        assert!(VoxelGrid::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(VoxelGrid::from_bytes(&bad).is_err());
    }

    #[test]
    fn shift_moves_content() {
        let mut g = VoxelGrid::zeros(4).unwrap();
        g.set(1, 1, 1, true);
        let s = g.shifted([2, 0, -1]);
        assert!(s.get(3, 1, 0));
        assert_eq!(s.occupied_count(), 1);
        assert_eq!(g.shifted([3, 0, 0]).occupied_count(), 0);
    }

    proptest::proptest! {
        #[test]
        fn voxelization_is_monotone(
            pts in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 0..40),
            extra in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5), 1..10),
        ) {
            let a: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let mut b = a.clone();
            b.extend(extra.iter().map(|&(x, y, z)| Vec3::new(x, y, z)));
            let ga = voxelize_points(&cloud(a), 8).unwrap();
            let gb = voxelize_points(&cloud(b), 8).unwrap();
            for (va, vb) in ga.data().iter().zip(gb.data()) {
                proptest::prop_assert!(*vb >= *va);
            }
        }
    }
}
