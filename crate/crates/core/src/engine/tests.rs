use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn assert_close(a: f64, b: f64, tol: f64, msg: &str) {
    assert!((a - b).abs() <= tol, "{msg}: {a} vs {b} (tol {tol})");
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

#[test]
fn test_elementwise_values() {
    let mut t = Tape::new();
    let a = t.param(&Array::from_vec(&[3], vec![1.0, -2.0, 3.0]));
    let b = t.param(&Array::from_vec(&[3], vec![4.0, 5.0, -6.0]));
    let r = t.add(&a, &b);
    assert_eq!(t.val(&r), &[5.0, 3.0, -3.0]);
    let r = t.sub(&a, &b);
    assert_eq!(t.val(&r), &[-3.0, -7.0, 9.0]);
    let r = t.mul(&a, &b);
    assert_eq!(t.val(&r), &[4.0, -10.0, -18.0]);
    let r = t.div(&a, &b);
    assert_eq!(t.val(&r), &[0.25, -0.4, -0.5]);
    let r = t.abs(&a);
    assert_eq!(t.val(&r), &[1.0, 2.0, 3.0]);
    let r = t.square(&a);
    assert_eq!(t.val(&r), &[1.0, 4.0, 9.0]);
    let s = t.sum(&a);
    assert_eq!(t.scalar_val(&s), 2.0);
    let m = t.mean(&a);
    assert_close(t.scalar_val(&m), 2.0 / 3.0, 1e-15, "mean");
}

#[test]
fn test_softmax_two_logits() {
    let mut t = Tape::new();
    let x = t.param(&Array::from_vec(&[1, 2], vec![1.0, 0.0]));
    let y = t.softmax_last_axis(&x);
    let v = t.val(&y);
    assert_close(v[0], 0.7311, 1e-4, "softmax[0]");
    assert_close(v[1], 0.2689, 1e-4, "softmax[1]");
}

#[test]
fn test_softmax_rows_sum_to_one_and_grads_sum_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = rand_array(&mut rng, &[5, 9], -4.0, 4.0);
    let w0 = rand_array(&mut rng, &[5, 9], -1.0, 1.0);
    let mut t = Tape::new();
    let x = t.param(&x0);
    let w = t.input(&w0);
    let y = t.softmax_last_axis(&x);
    for r in 0..5 {
        let s: f64 = t.val(&y)[r * 9..(r + 1) * 9].iter().sum();
        assert_close(s, 1.0, 1e-12, "softmax row sum");
    }
    let l = t.mul(&y, &w);
    let l = t.sum(&l);
    t.backward(&l);
    let g = t.grad(&x).unwrap();
    for r in 0..5 {
        let s: f64 = g[r * 9..(r + 1) * 9].iter().sum();
        assert_close(s, 0.0, 1e-10, "softmax grad row sum");
    }
}

#[test]
fn test_log_clamps_at_floor() {
    let mut t = Tape::new();
    let x = t.param(&Array::from_vec(&[2], vec![0.0, 1.0]));
    let y = t.log(&x);
    assert_close(t.val(&y)[0], LOG_EPS.ln(), 1e-12, "clamped log");
    assert_eq!(t.val(&y)[1], 0.0);
    let s = t.sum(&y);
    t.backward(&s);
    let g = t.grad(&x).unwrap();
    assert_eq!(g[0], 0.0, "no gradient below the clamp");
    assert_eq!(g[1], 1.0);
}

#[test]
fn test_matmul_against_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0 = rand_array(&mut rng, &[4, 6], -2.0, 2.0);
    let b0 = rand_array(&mut rng, &[6, 5], -2.0, 2.0);
    let mut t = Tape::new();
    let a = t.input(&a0);
    let b = t.input(&b0);
    let c = t.matmul(&a, &b);
    for i in 0..4 {
        for j in 0..5 {
            let mut s = 0.0;
            for k in 0..6 {
                s += a0.data[i * 6 + k] * b0.data[k * 5 + j];
            }
            assert_close(t.val(&c)[i * 5 + j], s, 1e-12, "matmul entry");
        }
    }
}

fn naive_conv(x: &Array, w: &Array, b: &Array, stride: usize, pad: usize) -> Vec<f64> {
    let (ic, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oc, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b.data[o];
                for i in 0..ic {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy >= 0 && iy < h as i64 && ix >= 0 && ix < wd as i64 {
                                s += x.at3(i, iy as usize, ix as usize)
                                    * w.data[((o * ic + i) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

#[test]
fn test_conv2d_against_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
        let x0 = rand_array(&mut rng, &[3, 7, 6], -1.0, 1.0);
        let w0 = rand_array(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b0 = rand_array(&mut rng, &[4], -1.0, 1.0);
        let mut t = Tape::new();
        let x = t.input(&x0);
        let w = t.input(&w0);
        let b = t.input(&b0);
        let y = t.conv2d(&x, &w, &b, stride, pad);
        let want = naive_conv(&x0, &w0, &b0, stride, pad);
        assert_eq!(t.val(&y).len(), want.len());
        for (got, want) in t.val(&y).iter().zip(&want) {
            assert_close(*got, *want, 1e-12, "conv entry");
        }
    }
}

#[test]
fn test_bilinear_sample_identity_and_midpoint() {
    // Integer coordinates reproduce the map exactly.
    let mut t = Tape::new();
    let map = Array::from_vec(&[1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let x = t.input(&map);
    let mut cv = Vec::new();
    for p in 0..6 {
        cv.push((p % 3) as f64);
    }
    for p in 0..6 {
        cv.push((p / 3) as f64);
    }
    let c = t.input(&Array::from_vec(&[2, 2, 3], cv));
    let y = t.bilinear_sample(&x, &c);
    assert_eq!(t.val(&y), map.data.as_slice());

    // Half-pixel sample on a linear ramp interpolates exactly.
    let mut t = Tape::new();
    let x = t.input(&map);
    let c = t.input(&Array::from_vec(&[2, 1, 1], vec![0.5, 0.0]));
    let y = t.bilinear_sample(&x, &c);
    assert_eq!(t.val(&y), &[0.5]);
}

#[test]
fn test_gather_scatter_identity() {
    let mut t = Tape::new();
    let x = t.param(&Array::from_vec(&[4], vec![3.0, 1.0, 4.0, 1.5]));
    let perm = Arc::new(vec![2usize, 0, 3, 1]);
    let g = t.gather(&x, &perm);
    let s = t.scatter_add(&g, &perm, 4);
    assert_eq!(t.val(&s), t.val(&x), "scatter of gather along a permutation is identity");

    let sub = Arc::new(vec![1usize, 3]);
    let src = t.param(&Array::from_vec(&[2], vec![7.0, 9.0]));
    let sc = t.scatter_add(&src, &sub, 4);
    let back = t.gather(&sc, &sub);
    assert_eq!(t.val(&back), t.val(&src), "gather of scatter over disjoint indices is identity");
}

#[test]
fn test_backward_accumulates_across_calls() {
    let mut t = Tape::new();
    let x = t.param(&Array::from_vec(&[2], vec![3.0, -1.0]));
    let y = t.square(&x);
    let l = t.sum(&y);
    t.backward(&l);
    assert_eq!(t.grad(&x).unwrap(), &[6.0, -2.0]);
    t.backward(&l);
    assert_eq!(t.grad(&x).unwrap(), &[12.0, -4.0], "second backward accumulates");
}

#[test]
fn test_detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.param(&Array::from_vec(&[2], vec![2.0, 5.0]));
    let d = t.detach(&x);
    assert_eq!(t.val(&d), t.val(&x));
    let y = t.square(&d);
    let l = t.sum(&y);
    t.backward(&l);
    assert!(t.grad(&x).is_none(), "detached path must leave no gradient");
}

#[test]
fn test_forward_replay_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_array(&mut rng, &[4, 4], -1.0, 1.0);
    let run = |x0: &Array| -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.param(x0);
        let s = t.softmax_last_axis(&x);
        let e = t.exp(&s);
        let n = t.l2_normalize_rows(&e);
        t.val(&n).to_vec()
    };
    let a = run(&x0);
    let b = run(&x0);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), "replay must be bit-identical");
}

#[test]
fn test_grad_check_every_primitive() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let step = GRAD_STEP;

        let c = rand_array(&mut rng, &[3, 4], 0.6, 1.6);
        type UnaryCase = (&'static str, Box<dyn Fn(&mut Tape, &Tensor) -> Tensor>, Array);
        let checks: Vec<UnaryCase> = vec![
            (
                "add",
                {
                    let c = c.clone();
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let cc = t.input(&c);
                        let y = t.add(x, &cc);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "sub",
                {
                    let c = c.clone();
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let cc = t.input(&c);
                        let y = t.sub(&cc, x);
                        let y = t.square(&y);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "mul",
                {
                    let c = c.clone();
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let cc = t.input(&c);
                        let y = t.mul(x, &cc);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "div_num",
                {
                    let c = c.clone();
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let cc = t.input(&c);
                        let y = t.div(x, &cc);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "div_den",
                {
                    let c = c.clone();
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let cc = t.input(&c);
                        let y = t.div(&cc, x);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], 0.7, 1.9),
            ),
            (
                "exp",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.exp(x);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "log",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.log(x);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], 0.4, 2.0),
            ),
            (
                "abs",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.abs(x);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], 0.2, 1.0),
            ),
            (
                "square",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.square(x);
                    t.mean(&y)
                }),
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "sum_last_axis",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.sum_last_axis(x);
                    let y = t.square(&y);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "leaky_relu",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let y = t.leaky_relu(x, LEAKY_SLOPE);
                    t.sum(&y)
                }),
                {
                    let mut a = rand_array(&mut rng, &[3, 4], 0.2, 1.0);
                    for (i, v) in a.data.iter_mut().enumerate() {
                        if i % 2 == 0 {
                            *v = -*v;
                        }
                    }
                    a
                },
            ),
            (
                "softmax",
                {
                    let w = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let wt = t.input(&w);
                        let y = t.softmax_last_axis(x);
                        let y = t.mul(&y, &wt);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -2.0, 2.0),
            ),
            (
                "l2_normalize",
                {
                    let w = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let wt = t.input(&w);
                        let y = t.l2_normalize_rows(x);
                        let y = t.mul(&y, &wt);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], 0.3, 1.5),
            ),
            (
                "matmul_lhs",
                {
                    let b = rand_array(&mut rng, &[4, 3], -1.0, 1.0);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let bt = t.input(&b);
                        let y = t.matmul(x, &bt);
                        let y = t.square(&y);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "matmul_rhs",
                {
                    let a = rand_array(&mut rng, &[3, 4], -1.0, 1.0);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let at = t.input(&a);
                        let y = t.matmul(&at, x);
                        let y = t.square(&y);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[4, 3], -1.0, 1.0),
            ),
            (
                "gather",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let idx = Arc::new(vec![5usize, 1, 1, 7, 0]);
                    let y = t.gather(x, &idx);
                    let y = t.square(&y);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[8], -1.0, 1.0),
            ),
            (
                "gather_rows",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let idx = Arc::new(vec![2usize, 0, 2]);
                    let y = t.gather_rows(x, &idx);
                    let y = t.square(&y);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "scatter_add",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let idx = Arc::new(vec![2usize, 0, 2, 5]);
                    let xf = x.reshape(&[4]);
                    let y = t.scatter_add(&xf, &idx, 6);
                    let y = t.square(&y);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[4], -1.0, 1.0),
            ),
            (
                "scatter_add_rows",
                Box::new(|t: &mut Tape, x: &Tensor| {
                    let idx = Arc::new(vec![1usize, 1, 0]);
                    let y = t.scatter_add_rows(x, &idx, 3);
                    let y = t.square(&y);
                    t.sum(&y)
                }),
                rand_array(&mut rng, &[3, 4], -1.0, 1.0),
            ),
            (
                "conv_input",
                {
                    let w = rand_array(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
                    let b = rand_array(&mut rng, &[2], -0.5, 0.5);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let wt = t.input(&w);
                        let bt = t.input(&b);
                        let y = t.conv2d(x, &wt, &bt, 2, 1);
                        let y = t.square(&y);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[2, 5, 6], -1.0, 1.0),
            ),
            (
                "conv_weight",
                {
                    let x = rand_array(&mut rng, &[2, 5, 6], -1.0, 1.0);
                    let b = rand_array(&mut rng, &[2], -0.5, 0.5);
                    Box::new(move |t: &mut Tape, w: &Tensor| {
                        let xt = t.input(&x);
                        let bt = t.input(&b);
                        let y = t.conv2d(&xt, w, &bt, 1, 1);
                        let y = t.square(&y);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[2, 2, 3, 3], -0.5, 0.5),
            ),
            (
                "conv_bias",
                {
                    let x = rand_array(&mut rng, &[2, 5, 6], -1.0, 1.0);
                    let w = rand_array(&mut rng, &[2, 2, 3, 3], -0.5, 0.5);
                    Box::new(move |t: &mut Tape, b: &Tensor| {
                        let xt = t.input(&x);
                        let wt = t.input(&w);
                        let y = t.conv2d(&xt, &wt, b, 1, 1);
                        let y = t.square(&y);
                        t.mean(&y)
                    })
                },
                rand_array(&mut rng, &[2], -0.5, 0.5),
            ),
            (
                "bilinear_map",
                {
                    let c = Array::from_vec(&[2, 2, 2], vec![0.7, 2.3, 1.6, 0.9, 0.4, 1.7, 2.2, 1.1]);
                    Box::new(move |t: &mut Tape, x: &Tensor| {
                        let ct = t.input(&c);
                        let y = t.bilinear_sample(x, &ct);
                        let y = t.square(&y);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[2, 4, 4], -1.0, 1.0),
            ),
            (
                "bilinear_coords",
                {
                    let m = rand_array(&mut rng, &[2, 5, 5], -1.0, 1.0);
                    Box::new(move |t: &mut Tape, c: &Tensor| {
                        let mt = t.input(&m);
                        let y = t.bilinear_sample(&mt, c);
                        let y = t.square(&y);
                        t.sum(&y)
                    })
                },
                rand_array(&mut rng, &[2, 2, 2], 0.3, 3.4),
            ),
        ];

        for (name, f, x0) in checks {
            let err = grad_check(f, &x0, step);
            assert!(err < GRAD_TOL, "primitive {name} grad check failed at seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn test_grad_check_params_matches_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::new();
    ps.push("w", rand_array(&mut rng, &[3, 3], -1.0, 1.0));
    ps.push("b", rand_array(&mut rng, &[3], -1.0, 1.0));
    let err = grad_check_params(
        |t, bound| {
            let w = bound.get("w");
            let b = bound.get("b");
            let wb = t.matmul(w, &b.reshape(&[3, 1]));
            let y = t.square(&wb);
            t.mean(&y)
        },
        &ps,
        GRAD_STEP,
    );
    assert!(err < GRAD_TOL, "param grad check rel err {err}");
}

#[test]
#[should_panic(expected = "shape mismatch")]
fn test_shape_mismatch_panics() {
    let mut t = Tape::new();
    let a = t.param(&Array::zeros(&[2, 2]));
    let b = t.param(&Array::zeros(&[3]));
    t.add(&a, &b);
}

#[test]
fn test_primitive_gradient_suite_passes() {
    for (name, err) in primitive_gradient_reports() {
        assert!(err < GRAD_TOL, "{name}: max rel grad error {err}");
    }
}
