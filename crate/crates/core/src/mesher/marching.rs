use rayon::prelude::*;

use super::tables::{CORNERS, EDGES, TRIANGLES};
use crate::geometry::{cell_center, TriMesh, Vec3};

/// Extracts the `iso` level set of a scalar field sampled at the cell
/// centers of a `resolution^3` grid over the canonical cube (x-fastest).
///
/// A sample counts as inside when `value >= iso`. Triangles are oriented
/// with normals pointing from inside to outside. Vertices on edges shared
/// by neighboring cubes are welded, so the result is closed whenever the
/// inside region does not reach the outermost samples.
pub fn extract_isosurface(values: &[f64], resolution: usize, iso: f64) -> TriMesh {
    let m = resolution;
    assert_eq!(values.len(), m * m * m, "field size does not match resolution");
    if m < 2 {
        return TriMesh::empty();
    }
    let idx = |x: usize, y: usize, z: usize| x + m * (y + m * z);

    // per z-slab lists of triangles as global edge ids
    let slabs: Vec<Vec<[usize; 3]>> = (0..m - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..m - 1 {
                for x in 0..m - 1 {
                    let mut case = 0usize;
                    for (c, off) in CORNERS.iter().enumerate() {
                        if values[idx(x + off[0], y + off[1], z + off[2])] < iso {
                            case |= 1 << c;
                        }
                    }
                    if case == 0 || case == 255 {
                        continue;
                    }
                    let row = &TRIANGLES[case];
                    for t in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                        let mut tri = [0usize; 3];
                        for (slot, &e) in tri.iter_mut().zip(t) {
                            let [c0, c1] = EDGES[e as usize];
                            let (o0, o1) = (CORNERS[c0], CORNERS[c1]);
                            let axis = (0..3).find(|&a| o0[a] != o1[a]).unwrap();
                            let lower = [o0[0].min(o1[0]), o0[1].min(o1[1]), o0[2].min(o1[2])];
                            let base = idx(x + lower[0], y + lower[1], z + lower[2]);
                            *slot = 3 * base + axis;
                        }
                        tris.push(tri);
                    }
                }
            }
            tris
        })
        .collect();

    let mut vertex_of_edge = vec![u32::MAX; 3 * m * m * m];
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(slabs.iter().map(Vec::len).sum());
    for tris in slabs {
        for tri in tris {
            let face = tri.map(|edge| {
                let slot = &mut vertex_of_edge[edge];
                if *slot == u32::MAX {
                    *slot = vertices.len() as u32;
                    vertices.push(edge_vertex(values, m, iso, edge));
                }
                *slot as usize
            });
            faces.push(face);
        }
    }
    TriMesh { vertices, faces }
}

/// Linear interpolation of `value - iso` along the edge with global id
/// `edge` (lower grid point index times three plus axis).
fn edge_vertex(values: &[f64], m: usize, iso: f64, edge: usize) -> Vec3 {
    let base = edge / 3;
    let axis = edge % 3;
    let (x, y, z) = (base % m, (base / m) % m, base / (m * m));
    let step = [1, m, m * m][axis];
    let (v0, v1) = (values[base], values[base + step]);
    let p0 = Vec3::new(cell_center(x, m), cell_center(y, m), cell_center(z, m));
    let mut p1 = p0;
    p1[axis] = cell_center([x, y, z][axis] + 1, m);
    let s = (iso - v0) / (v1 - v0);
    p0 + (p1 - p0) * s
}
