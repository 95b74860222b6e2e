//! ASCII mesh (OFF, OBJ) and point cloud (XYZ) I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{GeometryError, PointCloud, Result, TriMesh, Vec3};

/// Tolerance used to weld duplicate vertices at load time.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Loads an OFF or OBJ file (chosen by extension) and applies cleanup.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mut mesh = match ext.as_deref() {
        Some("off") => parse_off(&text)?,
        Some("obj") => parse_obj(&text)?,
        other => {
            return Err(GeometryError::InvalidParams(format!(
                "unsupported mesh extension {other:?} (expected .off or .obj)"
            )))
        }
    };
    mesh.cleanup(MERGE_TOLERANCE);
    if mesh.faces.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    Ok(mesh)
}

/// Saves as OFF or OBJ depending on the extension.
pub fn save_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("off") => to_off(mesh),
        Some(e) if e.eq_ignore_ascii_case("obj") => to_obj(mesh),
        other => {
            return Err(GeometryError::InvalidParams(format!(
                "unsupported mesh extension {other:?} (expected .off or .obj)"
            )))
        }
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("expected a number, found {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("expected an index, found {tok:?}")))
}

pub fn parse_off(text: &str) -> Result<TriMesh> {
    // tokens with their 1-based line numbers, comments stripped
    let mut tokens = text.lines().enumerate().flat_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("");
        l.split_whitespace().map(move |t| (i + 1, t))
    });
    let (line, header) = tokens.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if header != "OFF" {
        return Err(parse_err(line, format!("expected OFF header, found {header:?}")));
    }
    let mut next = |what: &str| {
        tokens.next().ok_or_else(|| {
            parse_err(
                text.lines().count().max(1),
                format!("unexpected end of file reading {what}"),
            )
        })
    };
    let (l, t) = next("vertex count")?;
    let nv = parse_usize(t, l)?;
    let (l, t) = next("face count")?;
    let nf = parse_usize(t, l)?;
    let (l, t) = next("edge count")?;
    parse_usize(t, l)?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut c = [0.0; 3];
        for slot in &mut c {
            let (l, t) = next("vertex coordinate")?;
            *slot = parse_f64(t, l)?;
        }
        vertices.push(Vec3::from(c));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (l, t) = next("face arity")?;
        let arity = parse_usize(t, l)?;
        if arity != 3 {
            return Err(parse_err(
                l,
                format!("only triangles are supported, found a {arity}-gon"),
            ));
        }
        let mut f = [0usize; 3];
        for slot in &mut f {
            let (l, t) = next("face index")?;
            *slot = parse_usize(t, l)?;
            if *slot >= nv {
                return Err(parse_err(l, format!("vertex index {} out of range (0..{nv})", *slot)));
            }
        }
        faces.push(f);
    }
    TriMesh::new(vertices, faces)
}

pub fn parse_obj(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<&str> = parts.collect();
                if c.len() < 3 {
                    return Err(parse_err(line, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(
                    parse_f64(c[0], line)?,
                    parse_f64(c[1], line)?,
                    parse_f64(c[2], line)?,
                ));
            }
            Some("f") => {
                let refs: Vec<&str> = parts.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        line,
                        format!("only triangles are supported, found {} vertices", refs.len()),
                    ));
                }
                let mut f = [0usize; 3];
                for (slot, r) in f.iter_mut().zip(&refs) {
                    let idx_tok = r.split('/').next().unwrap_or("");
                    let idx: i64 = idx_tok
                        .parse()
                        .map_err(|_| parse_err(line, format!("bad face index {r:?}")))?;
                    let n = vertices.len() as i64;
                    let resolved = match idx {
                        0 => return Err(parse_err(line, "OBJ indices are 1-based; found 0")),
                        k if k > 0 => k - 1,
                        k => n + k,
                    };
                    if resolved < 0 || resolved >= n {
                        return Err(parse_err(line, format!("face index {idx} out of range")));
                    }
                    *slot = resolved as usize;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

pub fn to_off(mesh: &TriMesh) -> String {
    let mut s = String::new();
    writeln!(s, "OFF").unwrap();
    writeln!(s, "{} {} 0", mesh.vertices.len(), mesh.faces.len()).unwrap();
    for v in &mesh.vertices {
        writeln!(s, "{} {} {}", v.x, v.y, v.z).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "3 {} {} {}", f[0], f[1], f[2]).unwrap();
    }
    s
}

/// OBJ with area-weighted per-vertex normals.
pub fn to_obj(mesh: &TriMesh) -> String {
    let mut normals = vec![Vec3::zeros(); mesh.vertices.len()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let n = mesh.face_cross(fi);
        for &v in f {
            normals[v] += n;
        }
    }
    let mut s = String::new();
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for n in &normals {
        let n = n.try_normalize(0.0).unwrap_or_else(Vec3::zeros);
        writeln!(s, "vn {} {} {}", n.x, n.y, n.z).unwrap();
    }
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| i + 1);
        writeln!(s, "f {a}//{a} {b}//{b} {c}//{c}").unwrap();
    }
    s
}

/// One `x y z [nx ny nz]` line per point.
pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for (i, p) in cloud.points.iter().enumerate() {
        match &cloud.normals {
            Some(ns) => {
                let n = ns[i];
                writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z).unwrap()
            }
            None => writeln!(s, "{} {} {}", p.x, p.y, p.z).unwrap(),
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path)?)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut with_normals: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let vals = l
            .split_whitespace()
            .map(|t| parse_f64(t, line))
            .collect::<Result<Vec<_>>>()?;
        let has_n = match vals.len() {
            3 => false,
            6 => true,
            n => return Err(parse_err(line, format!("expected 3 or 6 values, found {n}"))),
        };
        if *with_normals.get_or_insert(has_n) != has_n {
            return Err(parse_err(line, "mixed lines with and without normals"));
        }
        points.push(Vec3::new(vals[0], vals[1], vals[2]));
        if has_n {
            normals.push(Vec3::new(vals[3], vals[4], vals[5]));
        }
    }
    Ok(PointCloud {
        points,
        normals: (with_normals == Some(true)).then_some(normals),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synthetic::box_mesh;

    const CUBE_OFF: &str = "OFF
# unit cube
8 12 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 2 3 7
3 2 7 6
3 1 2 6
3 1 6 5
3 0 4 7
3 0 7 3
";

    #[test]
    fn off_unit_cube() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cube.off");
        fs::write(&p, CUBE_OFF).unwrap();
        let m = load_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
    }

    #[test]
    fn obj_zero_index_is_parse_error() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap_err();
        match err {
            GeometryError::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn obj_accepts_slash_and_negative_indices() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3//1 2/5/2 3\n").unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2]]);
    }

    #[test]
    fn off_bad_number_reports_line() {
        let err = parse_off("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn empty_mesh_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.obj");
        fs::write(&p, "v 0 0 0\n").unwrap();
        assert!(matches!(load_mesh(&p), Err(GeometryError::EmptyMesh)));
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = box_mesh(Vec3::new(0.1, 0.2, 0.3 + 1e-7));
        for name in ["b.obj", "b.off"] {
            let p = dir.path().join(name);
            save_mesh(&m, &p).unwrap();
            let back = load_mesh(&p).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn xyz_round_trip() {
        let c = PointCloud {
            points: vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(1e-9, 0.0, 0.5)],
            normals: Some(vec![Vec3::x(), Vec3::z()]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xyz");
        save_xyz(&c, &p).unwrap();
        assert_eq!(load_xyz(&p).unwrap(), c);
        assert!(parse_xyz("1 2\n").is_err());
    }
}
