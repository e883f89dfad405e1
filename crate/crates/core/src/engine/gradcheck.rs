//! Central finite-difference verification of recorded gradients.

use super::{Array, BoundParams, ParamSet, Tape, Tensor};

/// Relative-error bound used by the verification suites.
pub const GRAD_TOL: f64 = 1e-4;

/// Default finite-difference step scale.
pub const GRAD_STEP: f64 = 1e-5;

/// Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|)
/// for a scalar-valued `f`, stepping each element of `x0` by
/// `step * (1 + |x|)`. `f` must be deterministic.
pub fn grad_check<F>(f: F, x0: &Array, step: f64) -> f64
where
    F: Fn(&mut Tape, &Tensor) -> Tensor,
{
    let mut tape = Tape::new();
    let x = tape.param(x0);
    let loss = f(&mut tape, &x);
    assert_eq!(loss.numel(), 1, "grad_check target must be scalar");
    tape.backward(&loss);
    let analytic: Vec<f64> = tape.grad(&x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x0.numel()]);

    let eval = |xs: &Array| -> f64 {
        let mut t = Tape::new();
        let xt = t.input(xs);
        let l = f(&mut t, &xt);
        t.scalar_val(&l)
    };

    let mut worst = 0.0f64;
    let mut probe = x0.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data[i];
        let h = step * (1.0 + orig.abs());
        probe.data[i] = orig + h;
        let up = eval(&probe);
        probe.data[i] = orig - h;
        let dn = eval(&probe);
        probe.data[i] = orig;
        let numeric = (up - dn) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// `grad_check` over every element of every entry in a parameter set.
pub fn grad_check_params<F>(f: F, params: &ParamSet, step: f64) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Tensor,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound);
    assert_eq!(loss.numel(), 1, "grad_check target must be scalar");
    tape.backward(&loss);
    let analytic = bound.grads(&tape);

    let eval = |ps: &ParamSet| -> f64 {
        let mut t = Tape::new();
        let b = ps.bind(&mut t);
        let l = f(&mut t, &b);
        t.scalar_val(&l)
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (e, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe.entries[e].1.data[i];
            let h = step * (1.0 + orig.abs());
            probe.entries[e].1.data[i] = orig + h;
            let up = eval(&probe);
            probe.entries[e].1.data[i] = orig - h;
            let dn = eval(&probe);
            probe.entries[e].1.data[i] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Finite-difference report for every differentiable primitive, each probed
/// on a small fixed-seed input chosen to sit away from its kinks (relu and
/// abs zero crossings, integer sampling corners). `detach` is excluded by
/// nature: central differences measure the total derivative, which a
/// stop-gradient deliberately disagrees with; its zero-gradient contract is
/// covered by the isolation tests instead.
pub fn primitive_gradient_reports() -> Vec<(&'static str, f64)> {
    use super::arc_idx;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    // Magnitudes in [0.2, 1.0] with random sign: no value near zero.
    let mut draw = |shape: &[usize]| -> Array {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Array::from_vec(shape, data)
    };

    let x = draw(&[2, 6]);
    let big = draw(&[3, 4, 4]);
    let img = draw(&[2, 5, 5]);
    let kern = draw(&[3, 2, 3, 3]);
    let bias = draw(&[3]);
    let rows = draw(&[4, 3]);
    let coords = Array::from_vec(
        &[2, 2, 2],
        vec![0.3, 1.7, 2.4, 3.6, 0.6, 2.3, 1.4, 3.2],
    );

    type Probe = Box<dyn Fn(&mut Tape, &Tensor) -> Tensor>;
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut check = |name: &'static str, input: &Array, f: Probe| {
        out.push((name, grad_check(|t, v| f(t, v), input, GRAD_STEP)));
    };

    check("add", &x, Box::new(|t, v| { let h = t.scale(v, 0.75); let s = t.add(v, &h); t.sum(&s) }));
    check("sub", &x, Box::new(|t, v| { let h = t.square(v); let s = t.sub(v, &h); t.sum(&s) }));
    check("mul", &x, Box::new(|t, v| { let s = t.mul(v, v); t.sum(&s) }));
    check("div", &x, Box::new(|t, v| {
        let d = t.square(v);
        let d = t.add_scalar(&d, 1.5);
        let q = t.div(v, &d);
        t.sum(&q)
    }));
    check("add_scalar", &x, Box::new(|t, v| { let s = t.add_scalar(v, 2.5); let s = t.square(&s); t.sum(&s) }));
    check("scale", &x, Box::new(|t, v| { let s = t.scale(v, -1.25); let s = t.square(&s); t.sum(&s) }));
    check("exp", &x, Box::new(|t, v| { let e = t.exp(v); t.sum(&e) }));
    check("log", &x, Box::new(|t, v| {
        let p = t.square(v);
        let p = t.add_scalar(&p, 0.1);
        let l = t.log(&p);
        t.sum(&l)
    }));
    check("abs", &x, Box::new(|t, v| { let a = t.abs(v); let a = t.square(&a); t.sum(&a) }));
    check("square", &x, Box::new(|t, v| { let s = t.square(v); t.sum(&s) }));
    check("sum", &x, Box::new(|t, v| { let s = t.square(v); t.sum(&s) }));
    check("mean", &x, Box::new(|t, v| { let s = t.square(v); t.mean(&s) }));
    check("sum_last_axis", &big, Box::new(|t, v| {
        let s = t.sum_last_axis(v);
        let s = t.square(&s);
        t.sum(&s)
    }));
    check("matmul lhs", &x, Box::new(|t, v| {
        let c = t.input(&Array::from_vec(&[6, 2], (0..12).map(|i| 0.3 + 0.1 * i as f64).collect()));
        let m = t.matmul(v, &c);
        let m = t.square(&m);
        t.sum(&m)
    }));
    check("matmul rhs", &x, Box::new(|t, v| {
        let c = t.input(&Array::from_vec(&[3, 2], (0..6).map(|i| 0.4 - 0.15 * i as f64).collect()));
        let m = t.matmul(&c, v);
        let m = t.square(&m);
        t.sum(&m)
    }));
    check("conv2d input", &img, Box::new({
        let kern = kern.clone();
        let bias = bias.clone();
        move |t, v| {
            let w = t.input(&kern);
            let b = t.input(&bias);
            let c = t.conv2d(v, &w, &b, 1, 1);
            let c = t.square(&c);
            t.sum(&c)
        }
    }));
    check("conv2d weights", &kern, Box::new({
        let img = img.clone();
        let bias = bias.clone();
        move |t, v| {
            let i = t.input(&img);
            let b = t.input(&bias);
            let c = t.conv2d(&i, v, &b, 2, 1);
            let c = t.square(&c);
            t.sum(&c)
        }
    }));
    check("conv2d bias", &bias, Box::new({
        let img = img.clone();
        let kern = kern.clone();
        move |t, v| {
            let i = t.input(&img);
            let w = t.input(&kern);
            let c = t.conv2d(&i, &w, v, 1, 0);
            let c = t.square(&c);
            t.sum(&c)
        }
    }));
    check("leaky_relu", &x, Box::new(|t, v| { let r = t.leaky_relu(v, 0.1); let r = t.square(&r); t.sum(&r) }));
    check("softmax_last_axis", &x, Box::new(|t, v| {
        let s = t.softmax_last_axis(v);
        let s = t.square(&s);
        t.sum(&s)
    }));
    check("l2_normalize_rows", &x, Box::new(|t, v| {
        let n = t.l2_normalize_rows(v);
        let w = t.input(&Array::from_vec(&[2, 6], (0..12).map(|i| 0.2 + 0.05 * i as f64).collect()));
        let m = t.mul(&n, &w);
        t.sum(&m)
    }));
    check("gather", &x, Box::new(|t, v| {
        let g = t.gather(v, &arc_idx(vec![0, 3, 3, 7, 11]));
        let g = t.square(&g);
        t.sum(&g)
    }));
    check("gather_rows", &rows, Box::new(|t, v| {
        let g = t.gather_rows(v, &arc_idx(vec![1, 0, 1, 3]));
        let g = t.square(&g);
        t.sum(&g)
    }));
    check("scatter_add", &x, Box::new(|t, v| {
        let flat = v.reshape(&[12]);
        let s = t.scatter_add(&flat, &arc_idx(vec![0, 2, 2, 5, 1, 0, 4, 4, 4, 3, 5, 0]), 6);
        let s = t.square(&s);
        t.sum(&s)
    }));
    check("scatter_add_rows", &rows, Box::new(|t, v| {
        let s = t.scatter_add_rows(v, &arc_idx(vec![1, 0, 1, 2]), 3);
        let s = t.square(&s);
        t.sum(&s)
    }));
    check("bilinear_sample map", &img, Box::new({
        let coords = coords.clone();
        move |t, v| {
            let c = t.input(&coords);
            let s = t.bilinear_sample(v, &c);
            let s = t.square(&s);
            t.sum(&s)
        }
    }));
    check("bilinear_sample coords", &coords, Box::new({
        let img = img.clone();
        move |t, v| {
            let i = t.input(&img);
            let s = t.bilinear_sample(&i, v);
            let s = t.square(&s);
            t.sum(&s)
        }
    }));
    check("reshape", &x, Box::new(|t, v| {
        let r = v.reshape(&[3, 4]);
        let s = t.square(&r);
        t.sum(&s)
    }));
    check("chw_to_rows", &img, Box::new(|t, v| {
        let r = t.chw_to_rows(v);
        let s = t.square(&r);
        t.sum(&s)
    }));
    check("rows_to_chw", &rows, Box::new(|t, v| {
        let m = t.rows_to_chw(v, 2, 2);
        let s = t.square(&m);
        t.sum(&s)
    }));
    out
}
