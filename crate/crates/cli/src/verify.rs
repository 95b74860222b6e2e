//! The property battery behind `ifnet verify`: gradient checks, the
//! trilinear and occupancy oracles, marching cubes on analytic fields,
//! kd-tree exactness, shift equivariance against the global-latent
//! baseline, and a mutation check that the gradient checker catches an
//! injected adjoint error.

use std::fmt;
use std::time::Instant;

use anyhow::Result;
use ifnet::autodiff::{grad_check, grad_check_sampled, Fault, GradCheckReport, Tape, Tensor, Var};
use ifnet::geometry::synthetic::{box_mesh, capsule_mesh, icosphere};
use ifnet::geometry::{occupancy_oracle, Capsule, TriMesh, Vec3, VoxelGrid};
use ifnet::mesher::{marching_cubes, OccupancyField};
use ifnet::metrics::{brute_force_nearest, KdTree};
use ifnet::model::{
    baseline_forward, forward, query_points, BaselineConfig, BaselineParams, DecoderConfig, EncoderConfig, ModelConfig,
    ModelParams, QueryConfig, TapeModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Largest error observed, in the check's own units.
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} max_err={:.3e} tol={:.1e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance,
            self.seconds
        )
    }
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> Check {
    let start = Instant::now();
    let (passed, max_error) = match f() {
        Ok(e) => (e < tolerance, e),
        Err(_) => (false, f64::INFINITY),
    };
    Check {
        name: name.into(),
        passed,
        max_error,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

fn gc<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> ifnet::autodiff::Result<Var>,
{
    Ok(grad_check(f, inputs, 1e-5)?.max_rel_error)
}

/// Per-op gradient checks; the worst relative error over all ops.
pub fn op_gradients() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x4 = random(&[2, 4, 4, 4], &mut rng);
    let x2 = random(&[5, 4], &mut rng);
    let labels: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
    let queries: Vec<Vec3> = (0..6).map(|_| random_point(&mut rng, 0.45)).collect();
    Ok(vec![
        (
            "conv3d",
            gc(
                |t, v| t.conv3d(v[0], v[1], v[2]),
                &[x4.clone(), random(&[3, 2, 3, 3, 3], &mut rng), random(&[3], &mut rng)],
            )?,
        ),
        (
            "downsample2",
            gc(|t, v| t.downsample2(v[0]), std::slice::from_ref(&x4))?,
        ),
        (
            "trilinear",
            gc(|t, v| t.trilinear_sample(v[0], &queries), std::slice::from_ref(&x4))?,
        ),
        (
            "linear",
            gc(
                |t, v| t.linear(v[0], v[1], v[2]),
                &[x2.clone(), random(&[3, 4], &mut rng), random(&[3], &mut rng)],
            )?,
        ),
        ("relu", gc(|t, v| t.relu(v[0]), std::slice::from_ref(&x2))?),
        ("sigmoid", gc(|t, v| t.sigmoid(v[0]), std::slice::from_ref(&x2))?),
        (
            "concat",
            gc(
                |t, v| t.concat(&[v[0], v[1]], 1),
                &[x2.clone(), random(&[5, 2], &mut rng)],
            )?,
        ),
        (
            "bce_loss",
            gc(|t, v| t.bce_loss(v[0], &labels), std::slice::from_ref(&x2))?,
        ),
        (
            "mean_pool+repeat_rows",
            gc(
                |t, v| {
                    let m = t.mean_pool(v[0])?;
                    t.repeat_rows(m, 3)
                },
                &[x4],
            )?,
        ),
    ])
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            resolution: 8,
            scales: 2,
            channels: vec![2, 3],
            convs_per_scale: 2,
        },
        query: QueryConfig::for_resolution(8),
        decoder: DecoderConfig { hidden: vec![6] },
    }
}

fn random_voxels(n: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> VoxelGrid {
    let mut g = VoxelGrid::zeros(n).expect("resolution");
    for z in lo..hi {
        for y in lo..hi {
            for x in lo..hi {
                g.set(x, y, z, rng.random_bool(0.4));
            }
        }
    }
    g
}

/// Encode, extract and decode with a cross-entropy head, checked end to end.
pub fn composite_gradient() -> Result<GradCheckReport> {
    let params = ModelParams::init(tiny_model(), 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_voxels(8, 1, 7, &mut rng);
    let points: Vec<Vec3> = (0..12).map(|_| random_point(&mut rng, 0.45)).collect();
    let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    let inputs: Vec<Tensor> = params.tensors().iter().map(|(_, t)| t.clone()).collect();
    Ok(grad_check_sampled(
        |tape, vars| {
            let m = TapeModel::from_vars(&params, vars.to_vec());
            let logits = m.logits(tape, &x, &points).map_err(|e| match e {
                ifnet::model::ModelError::Autodiff(a) => a,
                other => panic!("model graph: {other}"),
            })?;
            tape.bce_loss(logits, &labels)
        },
        &inputs,
        1e-5,
        40,
        7,
    )?)
}

/// The conv adjoint with its weight gradient negated must fail the check.
pub fn mutation_caught() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&[1, 3, 3, 3], &mut rng),
        random(&[2, 1, 3, 3, 3], &mut rng),
        random(&[2], &mut rng),
    ];
    let r = grad_check(
        |t, v| {
            t.inject_fault(Fault::ConvWeightGradSign);
            t.conv3d(v[0], v[1], v[2])
        },
        &inputs,
        1e-5,
    )?;
    Ok(!r.passes(1e-6))
}

/// 8-corner blend written out term by term.
fn direct_trilinear(grid: &Tensor, p: &Vec3) -> Vec<f64> {
    let k = grid.shape()[1];
    let coord = |c: f64| ((c + 0.5) * k as f64 - 0.5).clamp(0.0, (k - 1) as f64);
    let (u, v, w) = (coord(p.x), coord(p.y), coord(p.z));
    let lo = |a: f64| (a.floor() as usize).min(k - 2);
    let (x0, y0, z0) = (lo(u), lo(v), lo(w));
    let (fx, fy, fz) = (u - x0 as f64, v - y0 as f64, w - z0 as f64);
    let at = |c: usize, x: usize, y: usize, z: usize| grid.data()[((c * k + z) * k + y) * k + x];
    (0..grid.shape()[0])
        .map(|c| {
            let mut s = 0.0;
            for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        s += wx * wy * wz * at(c, x0 + dx, y0 + dy, z0 + dz);
                    }
                }
            }
            s
        })
        .collect()
}

fn sample(grid: &Tensor, queries: &[Vec3]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone());
    let s = tape.trilinear_sample(g, queries)?;
    Ok(tape.value(s).clone())
}

/// 100 random grid and query cases against the direct formula.
pub fn trilinear_oracle() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..7);
        let c = rng.random_range(1..4);
        let grid = random(&[c, k, k, k], &mut rng);
        let p = random_point(&mut rng, 0.5);
        let got = sample(&grid, &[p])?;
        for (a, b) in got.data().iter().zip(direct_trilinear(&grid, &p)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Fraction of disagreements with analytic signs outside a 1e-5 band,
/// over 10,000 points for each of sphere, box and capsule.
pub fn occupancy_oracle_check() -> Result<f64> {
    let capsule = Capsule {
        a: Vec3::new(-0.2, -0.1, 0.0),
        b: Vec3::new(0.2, 0.15, 0.05),
        radius: 0.15,
    };
    let half = Vec3::new(0.3, 0.2, 0.35);
    let box_sdf = move |p: &Vec3| {
        let q = p.abs() - half;
        q.map(|c| c.max(0.0)).norm() + q.max().min(0.0)
    };
    type Sdf = Box<dyn Fn(&Vec3) -> f64>;
    let cases: Vec<(TriMesh, Sdf)> = vec![
        (icosphere(0.4, 5), Box::new(|p: &Vec3| p.norm() - 0.4)),
        (box_mesh(half), Box::new(box_sdf)),
        (capsule_mesh(&capsule, 48, 24), Box::new(move |p: &Vec3| capsule.sdf(p))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for (mesh, sdf) in cases {
        let pts: Vec<Vec3> = (0..10_000).map(|_| random_point(&mut rng, 0.5)).collect();
        let labels = occupancy_oracle(&mesh, &pts)?;
        // the tessellation deviates from the analytic surface by its chord error
        let band = chord_band(&mesh, &*sdf).max(1e-5);
        let (mut bad, mut counted) = (0usize, 0usize);
        for (p, &inside) in pts.iter().zip(&labels) {
            for (d, b) in [(sdf(p), band), (polytope_distance(&mesh, p), 1e-5)] {
                if d.abs() > b {
                    counted += 1;
                    bad += usize::from(inside != (d < 0.0));
                }
            }
        }
        worst = worst.max(bad as f64 / counted as f64);
    }
    Ok(worst)
}

/// Largest signed face-plane distance; for a convex mesh it is negative
/// exactly inside and bounds the true distance from below outside.
pub fn polytope_distance(mesh: &TriMesh, p: &Vec3) -> f64 {
    (0..mesh.faces.len())
        .filter_map(|f| mesh.face_normal(f).map(|n| n.dot(&(p - mesh.triangle(f)[0]))))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest distance of a face centroid from the analytic surface.
fn chord_band(mesh: &TriMesh, sdf: &dyn Fn(&Vec3) -> f64) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            sdf(&((a + b + c) / 3.0)).abs()
        })
        .fold(0.0, f64::max)
}

/// Smooth sphere field at M = 64: closed, outward, radius error in cells.
pub fn marching_cubes_check() -> Result<f64> {
    let m = 64;
    let f = OccupancyField::from_fn(m, |p| 1.0 / (1.0 + ((p.norm() - 0.4) / 0.05).exp()))?;
    let mesh = marching_cubes(&f, 0.5)?;
    if !(mesh.is_watertight() && mesh.is_consistently_oriented() && mesh.signed_volume() > 0.0) {
        return Ok(f64::INFINITY);
    }
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.4).abs()).fold(0.0, f64::max);
    Ok(worst * m as f64)
}

/// Count of queries where the tree and a linear scan disagree.
pub fn kd_tree_check() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Vec3> = (0..1000).map(|_| random_point(&mut rng, 0.5)).collect();
    let tree = KdTree::new(pts.clone());
    let wrong = (0..1000)
        .map(|_| random_point(&mut rng, 0.6))
        .filter(|q| tree.nearest(q) != brute_force_nearest(&pts, q))
        .count();
    Ok(wrong as f64)
}

/// Largest output change of the IF-Net and of the global-latent baseline
/// when input and queries move together by 2^(n-1) voxels.
pub fn shift_deviation() -> Result<(f64, f64)> {
    let n = 64;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            resolution: n,
            scales: 3,
            channels: vec![4, 8, 8],
            convs_per_scale: 2,
        },
        query: QueryConfig::for_resolution(n),
        decoder: DecoderConfig { hidden: vec![32, 32] },
    };
    let params = ModelParams::init(cfg.clone(), 12)?;
    let baseline = BaselineParams::init(
        BaselineConfig {
            encoder: cfg.encoder.clone(),
            hidden: vec![32, 32],
        },
        12,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_voxels(n, 16, 44, &mut rng);
    let s = 1i64 << (cfg.encoder.scales - 1);
    let xs = x.shifted([s, 0, 0]);
    let h = Vec3::new(s as f64 / n as f64, 0.0, 0.0);
    let points: Vec<Vec3> = (0..4000)
        .map(|_| random_point(&mut rng, 0.5))
        .filter(|p| clear_of_boundary(p, &cfg) && clear_of_boundary(&(p + h), &cfg))
        .collect();
    let moved: Vec<Vec3> = points.iter().map(|p| p + h).collect();
    let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let ifnet = dev(&forward(&params, &x, &points)?, &forward(&params, &xs, &moved)?);
    let base = dev(
        &baseline_forward(&baseline, &x, &points)?,
        &baseline_forward(&baseline, &xs, &moved)?,
    );
    Ok((ifnet, base))
}

/// Every stencil cell of every query position lies outside the band that
/// zero padding can reach, at every scale.
pub fn clear_of_boundary(p: &Vec3, cfg: &ModelConfig) -> bool {
    let bands = cfg.encoder.boundary_bands();
    query_points(p, &cfg.query).iter().all(|q| {
        cfg.encoder.grid_resolutions().iter().zip(&bands).all(|(&k, &b)| {
            (0..3).all(|a| {
                let i = ((q[a] + 0.5) * k as f64 - 0.5).floor();
                i >= b as f64 && i + 1.0 <= (k - 1 - b) as f64
            })
        })
    })
}

/// Runs the whole battery.
pub fn run_all() -> Vec<Check> {
    let mut checks = Vec::new();
    match op_gradients() {
        Ok(ops) => {
            for (name, e) in ops {
                checks.push(Check {
                    name: format!("gradient {name}"),
                    passed: e < 1e-6,
                    max_error: e,
                    tolerance: 1e-6,
                    seconds: 0.0,
                });
            }
        }
        Err(_) => checks.push(timed("gradient ops", 1e-6, || anyhow::bail!("op graph failed"))),
    }
    checks.push(timed("gradient composite", 1e-4, || {
        Ok(composite_gradient()?.max_rel_error)
    }));
    checks.push(timed("mutation caught (conv adjoint)", 0.5, || {
        Ok(if mutation_caught()? { 0.0 } else { 1.0 })
    }));
    checks.push(timed("trilinear oracle", 1e-12, trilinear_oracle));
    checks.push(timed("occupancy oracle (disagree frac)", 1e-12, occupancy_oracle_check));
    checks.push(timed("marching cubes sphere (cells)", 1.0, marching_cubes_check));
    checks.push(timed("kd-tree vs brute force (misses)", 0.5, kd_tree_check));
    let start = Instant::now();
    match shift_deviation() {
        Ok((ifnet, base)) => {
            let seconds = start.elapsed().as_secs_f64();
            checks.push(Check {
                name: "shift equivariance".into(),
                passed: ifnet < 1e-5,
                max_error: ifnet,
                tolerance: 1e-5,
                seconds,
            });
            let ratio = base / ifnet.max(1e-5);
            checks.push(Check {
                name: "baseline contrast (1/ratio)".into(),
                passed: ratio >= 10.0,
                max_error: 1.0 / ratio,
                tolerance: 0.1,
                seconds: 0.0,
            });
        }
        Err(_) => checks.push(timed("shift equivariance", 1e-5, || anyhow::bail!("model failed"))),
    }
    checks
}
