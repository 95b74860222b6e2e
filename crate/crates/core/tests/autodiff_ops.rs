use ifnet::autodiff::{grad_check, Fault, Tape, Tensor, Var};
use ifnet::geometry::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn at4(t: &Tensor, c: usize, z: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((c * s[1] + z) * s[2] + y) * s[3] + x]
}

/// Direct seven-loop convolution.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (ci_n, d, h, wd) = (s[0], s[1] as isize, s[2] as isize, s[3] as isize);
    let co_n = w.shape()[0];
    let mut out = Vec::new();
    for co in 0..co_n {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..ci_n {
                        for kz in 0..3isize {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sz, sy, sx) = (z + kz - 1, y + ky - 1, xx + kx - 1);
                                    if sz < 0 || sy < 0 || sx < 0 || sz >= d || sy >= h || sx >= wd {
                                        continue;
                                    }
                                    let wi = (((co * ci_n + ci) * 3 + kz as usize) * 3 + ky as usize) * 3 + kx as usize;
                                    acc += w.data()[wi] * at4(x, ci, sz as usize, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn run<F: FnOnce(&mut Tape) -> Var>(f: F) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 4, 5, 3], &mut rng);
    let mut w = Tensor::zeros(&[2, 2, 3, 3, 3]);
    for c in 0..2 {
        w.data_mut()[(c * 2 + c) * 27 + 13] = 1.0;
    }
    let y = run(|t| {
        let (x, w, b) = (t.constant(x.clone()), t.param(w), t.param(Tensor::zeros(&[2])));
        t.conv3d(x, w, b).unwrap()
    });
    assert_eq!(y, x);
}

#[test]
fn conv_box_filter_on_delta() {
    let mut x = Tensor::zeros(&[1, 5, 5, 5]);
    x.data_mut()[2 * 25 + 2 * 5 + 2] = 1.0;
    let y = run(|t| {
        let (x, w, b) = (
            t.constant(x),
            t.param(Tensor::full(&[1, 1, 3, 3, 3], 1.0)),
            t.param(Tensor::zeros(&[1])),
        );
        t.conv3d(x, w, b).unwrap()
    });
    for z in 0..5 {
        for yy in 0..5 {
            for xx in 0..5 {
                let near = [z, yy, xx].iter().all(|&c| (1..=3).contains(&c));
                assert_eq!(at4(&y, 0, z, yy, xx), if near { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for shape in [[1, 4, 4, 4], [3, 6, 5, 7], [2, 1, 1, 1]] {
        let x = random(&shape, &mut rng);
        let w = random(&[4, shape[0], 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let expect = naive_conv(&x, &w, &b);
        let y = run(|t| {
            let (x, w, b) = (t.constant(x.clone()), t.param(w.clone()), t.param(b.clone()));
            t.conv3d(x, w, b).unwrap()
        });
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 4, 4, 4]));
    let w = t.param(Tensor::zeros(&[3, 1, 3, 3, 3]));
    let b = t.param(Tensor::zeros(&[3]));
    assert!(t.conv3d(x, w, b).is_err());
}

#[test]
fn downsample_ramp_matches_brute_force() {
    let x = Tensor::new(vec![2, 4, 6, 4], (0..192).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
    let y = run(|t| {
        let x = t.constant(x.clone());
        t.downsample2(x).unwrap()
    });
    assert_eq!(y.shape(), &[2, 2, 3, 2]);
    for c in 0..2 {
        for z in 0..2 {
            for yy in 0..3 {
                for xx in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for o in 0..8 {
                        m = m.max(at4(&x, c, 2 * z + (o >> 2), 2 * yy + ((o >> 1) & 1), 2 * xx + (o & 1)));
                    }
                    assert_eq!(at4(&y, c, z, yy, xx), m);
                }
            }
        }
    }
}

#[test]
fn downsample_ties_route_to_first_index() {
    let mut t = Tape::new();
    let x = t.param(Tensor::full(&[1, 2, 2, 2], 3.0));
    let y = t.downsample2(x).unwrap();
    assert_eq!(t.value(y).data(), &[3.0]);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

    let mut data = vec![0.0; 8];
    data[3] = 5.0;
    data[6] = 5.0;
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![1, 2, 2, 2], data).unwrap());
    let y = t.downsample2(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data()[3], 1.0);
    assert_eq!(g.get(x).unwrap().data()[6], 0.0);
}

#[test]
fn downsample_rejects_odd_dims() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(t.downsample2(x).is_err());
}

/// Independent blend: explicit clamp and eight-term sum.
fn direct_trilinear(grid: &Tensor, p: &Vec3) -> Vec<f64> {
    let k = grid.shape()[1];
    let coord = |c: f64| ((c + 0.5) * k as f64 - 0.5).max(0.0).min((k - 1) as f64);
    let (ux, uy, uz) = (coord(p.x), coord(p.y), coord(p.z));
    let lo = |u: f64| if k == 1 { 0 } else { (u.floor() as usize).min(k - 2) };
    let (x0, y0, z0) = (lo(ux), lo(uy), lo(uz));
    let (fx, fy, fz) = (ux - x0 as f64, uy - y0 as f64, uz - z0 as f64);
    let up = |i: usize| (i + 1).min(k - 1);
    (0..grid.shape()[0])
        .map(|c| {
            let v = |x: usize, y: usize, z: usize| at4(grid, c, z, y, x);
            (1.0 - fx) * (1.0 - fy) * (1.0 - fz) * v(x0, y0, z0)
                + fx * (1.0 - fy) * (1.0 - fz) * v(up(x0), y0, z0)
                + (1.0 - fx) * fy * (1.0 - fz) * v(x0, up(y0), z0)
                + fx * fy * (1.0 - fz) * v(up(x0), up(y0), z0)
                + (1.0 - fx) * (1.0 - fy) * fz * v(x0, y0, up(z0))
                + fx * (1.0 - fy) * fz * v(up(x0), y0, up(z0))
                + (1.0 - fx) * fy * fz * v(x0, up(y0), up(z0))
                + fx * fy * fz * v(up(x0), up(y0), up(z0))
        })
        .collect()
}

fn sample(grid: &Tensor, queries: &[Vec3]) -> Tensor {
    run(|t| {
        let g = t.constant(grid.clone());
        t.trilinear_sample(g, queries).unwrap()
    })
}

#[test]
fn trilinear_identities() {
    let g = Tensor::full(&[2, 4, 4, 4], 0.7);
    let q = [Vec3::new(0.1, -0.5, 0.5), Vec3::new(0.33, 0.2, -0.01)];
    assert!(sample(&g, &q).data().iter().all(|&v| v == 0.7));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random(&[3, 8, 8, 8], &mut rng);
    let c = |i: usize| -0.5 + (i as f64 + 0.5) / 8.0;
    let node = sample(&g, &[Vec3::new(c(2), c(5), c(7))]);
    for ch in 0..3 {
        assert_eq!(node.data()[ch], at4(&g, ch, 7, 5, 2));
    }
    let mid = sample(&g, &[Vec3::new((c(2) + c(3)) / 2.0, c(5), c(1))]);
    for ch in 0..3 {
        let mean = (at4(&g, ch, 1, 5, 2) + at4(&g, ch, 1, 5, 3)) / 2.0;
        assert_eq!(mid.data()[ch], mean);
    }
}

#[test]
fn trilinear_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100 {
        let k = 1 + case % 9;
        let g = random(&[2, k, k, k], &mut rng);
        let q: Vec<Vec3> = (0..20)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.5..=0.5),
                    rng.random_range(-0.5..=0.5),
                    rng.random_range(-0.5..=0.5),
                )
            })
            .collect();
        let out = sample(&g, &q);
        for (qi, p) in q.iter().enumerate() {
            for (ch, e) in direct_trilinear(&g, p).into_iter().enumerate() {
                assert!((out.data()[qi * 2 + ch] - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn trilinear_rejects_outside_queries() {
    let mut t = Tape::new();
    let g = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(t.trilinear_sample(g, &[Vec3::new(0.0, 0.5000001, 0.0)]).is_err());
}

#[test]
fn linear_identities_and_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[5, 3], &mut rng);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let lin = |x: &Tensor, w: &Tensor, b: &Tensor| {
        run(|t| {
            let (x, w, b) = (t.constant(x.clone()), t.param(w.clone()), t.param(b.clone()));
            t.linear(x, w, b).unwrap()
        })
    };
    assert_eq!(lin(&x, &eye, &Tensor::zeros(&[3])), x);
    let b = Tensor::from_vec(vec![1.0, -2.0]);
    let y = lin(&x, &Tensor::zeros(&[2, 3]), &b);
    for row in y.data().chunks(2) {
        assert_eq!(row, b.data());
    }
    let w = random(&[4, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let y = lin(&x, &w, &b);
    for q in 0..5 {
        for o in 0..4 {
            let mut s = b.data()[o];
            for i in 0..3 {
                s += x.data()[q * 3 + i] * w.data()[o * 3 + i];
            }
            assert!((y.data()[q * 4 + o] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_identities() {
    let x = Tensor::new(vec![4], vec![0.0, 1.5, 2.0, 0.25]).unwrap();
    assert_eq!(
        run(|t| {
            let v = t.constant(x.clone());
            t.relu(v).unwrap()
        }),
        x
    );
    let s = run(|t| {
        let v = t.constant(Tensor::from_vec(vec![0.0, 800.0, -800.0]));
        t.sigmoid(v).unwrap()
    });
    assert_eq!(s.data(), &[0.5, 1.0, 0.0]);
    assert_eq!(
        run(|t| {
            let v = t.constant(x.clone());
            t.concat(&[v], 0).unwrap()
        }),
        x
    );

    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap();
    let c = run(|t| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        t.concat(&[a, b], 1).unwrap()
    });
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
}

fn bce(logits: Vec<f64>, labels: &[f64]) -> f64 {
    run(|t| {
        let l = t.constant(Tensor::from_vec(logits));
        t.bce_loss(l, labels).unwrap()
    })
    .item()
}

#[test]
fn bce_values() {
    assert!((bce(vec![0.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce(vec![40.0], &[1.0]) < 1e-17);
    assert!((bce(vec![-40.0], &[1.0]) - 40.0).abs() < 1e-12);
    let mut t = Tape::new();
    let l = t.constant(Tensor::from_vec(vec![0.0]));
    assert!(t.bce_loss(l, &[0.5]).is_err());
}

#[test]
fn bce_matches_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-30.0..30.0)).collect();
        let y: Vec<f64> = (0..16).map(|_| rng.random_range(0..2) as f64).collect();
        // y ln(1 + e^-x) + (1 - y) ln(1 + e^x)
        let reference: f64 = x
            .iter()
            .zip(&y)
            .map(|(&x, &y)| y * (-x).exp().ln_1p() + (1.0 - y) * x.exp().ln_1p())
            .sum::<f64>()
            / 16.0;
        let got = bce(x, &y);
        assert!((got - reference).abs() < 1e-12 * reference.max(1.0));
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random(&[2, 4, 4, 4], &mut rng),
        random(&[3, 2, 3, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let r = grad_check(|t, v| t.conv3d(v[0], v[1], v[2]), &inputs, 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    assert_eq!(r.excluded, 0);
}

#[test]
fn injected_conv_fault_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs = [
        random(&[2, 4, 4, 4], &mut rng),
        random(&[3, 2, 3, 3, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let r = grad_check(
        |t, v| {
            t.inject_fault(Fault::ConvWeightGradSign);
            t.conv3d(v[0], v[1], v[2])
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(!r.passes(1e-6));
}

#[test]
fn downsample_gradients_and_tie_exclusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = grad_check(|t, v| t.downsample2(v[0]), &[random(&[2, 4, 2, 4], &mut rng)], 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(|t, v| t.downsample2(v[0]), &[Tensor::full(&[1, 2, 2, 2], 1.0)], 1e-5).unwrap();
    assert!(r.excluded > 0, "{r:?}");
    assert!(r.passes(1e-6));
}

#[test]
fn trilinear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q: Vec<Vec3> = (0..30)
        .map(|_| {
            Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
        })
        .collect();
    let r = grad_check(
        |t, v| t.trilinear_sample(v[0], &q),
        &[random(&[2, 4, 4, 4], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn dense_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[6, 4], &mut rng);
    let r = grad_check(
        |t, v| t.linear(v[0], v[1], v[2]),
        &[x.clone(), random(&[3, 4], &mut rng), random(&[3], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(|t, v| t.relu(v[0]), std::slice::from_ref(&x), 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(|t, v| t.sigmoid(v[0]), std::slice::from_ref(&x), 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(
        |t, v| t.concat(&[v[0], v[1]], 1),
        &[x.clone(), random(&[6, 2], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let labels: Vec<f64> = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let r = grad_check(|t, v| t.bce_loss(v[0], &labels), std::slice::from_ref(&x), 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(
        |t, v| {
            let m = t.mean_pool(v[0])?;
            t.repeat_rows(m, 3)
        },
        &[random(&[2, 2, 2, 2], &mut rng)],
        1e-5,
    )
    .unwrap();
    assert!(r.passes(1e-6), "{r:?}");
    let r = grad_check(|t, v| t.reshape(v[0], &[3, 8]), &[x], 1e-5).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn relu_kink_is_excluded() {
    let x = Tensor::from_vec(vec![0.0, 1.0, -1.0]);
    let r = grad_check(|t, v| t.relu(v[0]), &[x], 1e-5).unwrap();
    assert_eq!(r.excluded, 1);
    assert!(r.passes(1e-6));
}

#[test]
fn fan_out_gradients_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[3, 2], &mut rng);
    let w = random(&[2, 2], &mut rng);
    let b = random(&[2], &mut rng);
    // x used twice
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.param(x.clone()), t.param(w.clone()), t.param(b.clone()));
    let a = t.linear(xv, wv, bv).unwrap();
    let r = t.relu(xv).unwrap();
    let c = t.concat(&[a, r], 1).unwrap();
    let s = t
        .weighted_sum(c, &(0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>())
        .unwrap();
    let shared = t.backward(s).unwrap().get(xv).unwrap().clone();
    // same graph with two independent copies of x
    let mut t = Tape::new();
    let (x1, x2, wv, bv) = (t.param(x.clone()), t.param(x.clone()), t.param(w), t.param(b));
    let a = t.linear(x1, wv, bv).unwrap();
    let r = t.relu(x2).unwrap();
    let c = t.concat(&[a, r], 1).unwrap();
    let s = t
        .weighted_sum(c, &(0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>())
        .unwrap();
    let g = t.backward(s).unwrap();
    for i in 0..6 {
        let sum = g.get(x1).unwrap().data()[i] + g.get(x2).unwrap().data()[i];
        assert!((shared.data()[i] - sum).abs() < 1e-15);
    }
}

#[test]
fn reverse_sweep_visits_in_reverse_order() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1.0, -2.0]));
    let a = t.relu(x).unwrap();
    let b = t.sigmoid(a).unwrap();
    let c = t.concat(&[a, b], 0).unwrap();
    let s = t.weighted_sum(c, &[1.0, 1.0, 1.0, 1.0]).unwrap();
    let g = t.backward(s).unwrap();
    let order = g.visit_order();
    assert_eq!(order, &[s.index(), c.index(), b.index(), a.index(), x.index()]);
}

#[test]
fn non_finite_values_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![1e300, 1e300]));
    let w = t.param(Tensor::new(vec![1, 2], vec![1e300, 1e300]).unwrap());
    let b = t.param(Tensor::zeros(&[1]));
    let x = t.reshape(x, &[1, 2]).unwrap();
    assert!(t.linear(x, w, b).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn linear_adjoint_is_exact(seed in 0u64..1000, q in 1usize..6, fi in 1usize..5, fo in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = grad_check(
            |t, v| t.linear(v[0], v[1], v[2]),
            &[random(&[q, fi], &mut rng), random(&[fo, fi], &mut rng), random(&[fo], &mut rng)],
            1e-5,
        ).unwrap();
        prop_assert!(r.passes(1e-6));
    }

    #[test]
    fn conv_forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 4, 2, 6], &mut rng);
        let w = random(&[2, 2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let once = || run(|t| {
            let (x, w, b) = (t.constant(x.clone()), t.param(w.clone()), t.param(b.clone()));
            t.conv3d(x, w, b).unwrap()
        });
        prop_assert_eq!(once(), once());
    }
}
