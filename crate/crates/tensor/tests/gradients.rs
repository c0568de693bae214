//! Analytic gradients against central finite differences of independent
//! double-precision reference implementations.

use flowstrike_tensor::{
    avg_pool2x2, conv2d, finite_diff_at, finite_diff_grad, inverse, log_abs_det, matmul,
    relative_error, softmax_cross_entropy, Prng, Result, Tensor,
};

const SEEDS: u64 = 20;
const TOL: f32 = 1e-3;

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Compares `d/dx sum(r * op(x))` from backward() with finite differences of
/// the f64 reference. `build` maps the leaf to the engine output;
/// `reference` maps the leaf values to the reference output.
fn check<B, R>(name: &str, x: &Tensor, r: &[f64], build: B, reference: R, h: f32)
where
    B: Fn(&Tensor) -> Result<Tensor>,
    R: Fn(&[f64]) -> Vec<f64>,
{
    x.zero_grad();
    let out = build(x).unwrap();
    assert_eq!(out.numel(), r.len(), "{name}: weight length");
    let rt = Tensor::from_vec(r.iter().map(|&v| v as f32).collect(), out.shape()).unwrap();
    out.mul(&rt).unwrap().sum().unwrap().backward().unwrap();
    let analytic = x.grad().unwrap();
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = finite_diff_at(|t| Ok(dot(&reference(&f64s(t)), r)), x, &coords, h).unwrap();
    let scale = analytic.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-3);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n as f32, 1e-2 * scale);
        assert!(err < TOL, "{name}: coord {i} analytic {a} numeric {n} rel err {err}");
    }
}

fn away_from_zero(p: &mut Prng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v = p.uniform_range(lo, hi);
            if v.abs() < 0.05 {
                0.05f32.copysign(v)
            } else {
                v
            }
        })
        .collect()
}

#[test]
fn unary_ops_match_reference() {
    type Unary = (&'static str, fn(&Tensor) -> Result<Tensor>, fn(f64) -> f64, f32, f32);
    let cases: Vec<Unary> = vec![
        ("neg", |t| t.neg(), |x| -x, -2.0, 2.0),
        ("exp", |t| t.exp(), f64::exp, -2.0, 2.0),
        ("log", |t| t.log(), f64::ln, 0.1, 3.0),
        ("tanh", |t| t.tanh(), f64::tanh, -2.0, 2.0),
        ("sigmoid", |t| t.sigmoid(), |x| 1.0 / (1.0 + (-x).exp()), -4.0, 4.0),
        ("abs", |t| t.abs(), f64::abs, -2.0, 2.0),
        ("sign", |t| t.sign(), f64::signum, -2.0, 2.0),
        ("relu", |t| t.relu(), |x| x.max(0.0), -2.0, 2.0),
        ("sqrt", |t| t.sqrt(), f64::sqrt, 0.1, 3.0),
        ("square", |t| t.square(), |x| x * x, -2.0, 2.0),
        ("clamp", |t| t.clamp(-0.5, 0.7), |x| x.clamp(-0.5, 0.7), -2.0, 2.0),
    ];
    for seed in 0..SEEDS {
        let mut p = Prng::new(seed);
        let n = 1 + p.below(12);
        for (name, op, f, lo, hi) in &cases {
            let mut vals = away_from_zero(&mut p, n, *lo, *hi);
            if *name == "clamp" {
                // keep clear of the clamp boundaries
                for v in &mut vals {
                    if (*v + 0.5).abs() < 0.01 || (*v - 0.7).abs() < 0.01 {
                        *v += 0.05;
                    }
                }
            }
            let x = Tensor::param(vals, &[n]).unwrap();
            let r: Vec<f64> = p.normal_vec(n).into_iter().map(f64::from).collect();
            check(name, &x, &r, op, |v| v.iter().map(|&x| f(x)).collect(), 1e-3);
        }
    }
}

#[test]
fn exp_derivative_at_zero_and_one() {
    let x = Tensor::param(vec![0.0, 1.0], &[2]).unwrap();
    x.exp().unwrap().sum().unwrap().backward().unwrap();
    let g = x.grad().unwrap();
    let fd = finite_diff_grad(
        |t| Ok(t.data().iter().map(|&v| (v as f64).exp()).sum()),
        &x,
        1e-3,
    )
    .unwrap()
    .to_vec();
    assert!((g[0] - 1.0).abs() < 1e-4 && (g[1] - std::f32::consts::E).abs() < 1e-4);
    for (a, b) in g.iter().zip(fd) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn binary_ops_match_reference() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(100 + seed);
        let n = 1 + p.below(10);
        let av = away_from_zero(&mut p, n, -2.0, 2.0);
        let bv = away_from_zero(&mut p, n, -2.0, 2.0);
        let sv = away_from_zero(&mut p, 1, 0.5, 2.0);
        let r: Vec<f64> = p.normal_vec(n).into_iter().map(f64::from).collect();
        let b = Tensor::from_vec(bv.clone(), &[n]).unwrap();
        let s = Tensor::from_vec(sv.clone(), &[]).unwrap();
        let bref: Vec<f64> = bv.iter().map(|&v| v as f64).collect();
        let sref = sv[0] as f64;

        let a = Tensor::param(av.clone(), &[n]).unwrap();
        check("add", &a, &r, |t| t.add(&b), |x| x.iter().zip(&bref).map(|(x, y)| x + y).collect(), 1e-3);
        check("sub", &a, &r, |t| t.sub(&b), |x| x.iter().zip(&bref).map(|(x, y)| x - y).collect(), 1e-3);
        check("mul", &a, &r, |t| t.mul(&b), |x| x.iter().zip(&bref).map(|(x, y)| x * y).collect(), 1e-3);
        check("div", &a, &r, |t| t.div(&b), |x| x.iter().zip(&bref).map(|(x, y)| x / y).collect(), 1e-3);
        check("div-scalar", &a, &r, |t| t.div(&s), |x| x.iter().map(|x| x / sref).collect(), 1e-3);
        check("affine", &a, &r, |t| t.affine(-1.5, 0.3), |x| x.iter().map(|x| -1.5 * x + 0.3).collect(), 1e-3);

        // gradient w.r.t. the right operand, including the broadcast scalar
        let bp = Tensor::param(bv.clone(), &[n]).unwrap();
        let aref: Vec<f64> = av.iter().map(|&v| v as f64).collect();
        let ac = Tensor::from_vec(av.clone(), &[n]).unwrap();
        check("div-rhs", &bp, &r, |t| ac.div(t), |y| aref.iter().zip(y).map(|(x, y)| x / y).collect(), 1e-3);
        let sp = Tensor::param(sv.clone(), &[]).unwrap();
        check("mul-scalar-rhs", &sp, &r, |t| ac.mul(t), |y| aref.iter().map(|x| x * y[0]).collect(), 1e-3);
    }
}

fn conv_ref(x: &[f64], k: &[f64], bias: &[f64], dims: [usize; 8]) -> Vec<f64> {
    let [n, cin, h, w, cout, kh, kw, stride] = dims;
    let pad = 1;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * k[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((b * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_reference() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(200 + seed);
        let (n, cin, cout) = (1 + p.below(2), 1 + p.below(3), 1 + p.below(3));
        let (h, w) = (3 + p.below(4), 3 + p.below(4));
        let (kh, kw) = if seed % 3 == 0 { (1, 1) } else { (3, 3) };
        let stride = 1 + p.below(2);
        let dims = [n, cin, h, w, cout, kh, kw, stride];
        let xv = p.normal_vec(n * cin * h * w);
        let kv = p.normal_vec(cout * cin * kh * kw);
        let bv = p.normal_vec(cout);
        let x = Tensor::param(xv.clone(), &[n, cin, h, w]).unwrap();
        let k = Tensor::param(kv.clone(), &[cout, cin, kh, kw]).unwrap();
        let bias = Tensor::param(bv.clone(), &[cout]).unwrap();
        let out_len = conv2d(&x, &k, Some(&bias), stride, 1).unwrap().numel();
        let r: Vec<f64> = p.normal_vec(out_len).into_iter().map(f64::from).collect();
        let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let (x64, k64, b64) = (to64(&xv), to64(&kv), to64(&bv));
        check(
            "conv2d/input",
            &x,
            &r,
            |t| conv2d(t, &k, Some(&bias), stride, 1),
            |v| conv_ref(v, &k64, &b64, dims),
            1e-2,
        );
        check(
            "conv2d/kernel",
            &k,
            &r,
            |t| conv2d(&x, t, Some(&bias), stride, 1),
            |v| conv_ref(&x64, v, &b64, dims),
            1e-2,
        );
        check(
            "conv2d/bias",
            &bias,
            &r,
            |t| conv2d(&x, &k, Some(t), stride, 1),
            |v| conv_ref(&x64, &k64, v, dims),
            1e-2,
        );
    }
}

#[test]
fn conv2d_gradient_on_1x2x4x4() {
    let mut p = Prng::new(7);
    let x = Tensor::param(p.normal_vec(32), &[1, 2, 4, 4]).unwrap();
    let k = Tensor::from_vec(p.normal_vec(3 * 2 * 9), &[3, 2, 3, 3]).unwrap();
    x.zero_grad();
    let out = conv2d(&x, &k, None, 1, 1).unwrap();
    out.square().unwrap().sum().unwrap().backward().unwrap();
    let analytic = x.grad().unwrap();
    let numeric = finite_diff_grad(
        |t| {
            let y = conv2d(t, &k, None, 1, 1)?;
            let s: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum();
            Ok(s)
        },
        &x,
        1e-2,
    )
    .unwrap()
    .to_vec();
    let scale = analytic.iter().fold(0f32, |m, v| m.max(v.abs()));
    for (a, n) in analytic.iter().zip(numeric) {
        assert!(relative_error(*a, n, 1e-2 * scale) < 1e-3, "{a} vs {n}");
    }
}

#[test]
fn matmul_matches_reference() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(300 + seed);
        let (m, k, n) = (1 + p.below(4), 1 + p.below(4), 1 + p.below(4));
        let av = p.normal_vec(m * k);
        let bv = p.normal_vec(k * n);
        let r: Vec<f64> = p.normal_vec(m * n).into_iter().map(f64::from).collect();
        let a = Tensor::param(av.clone(), &[m, k]).unwrap();
        let b = Tensor::param(bv.clone(), &[k, n]).unwrap();
        let mm = move |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                }
            }
            c
        };
        let a64: Vec<f64> = av.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = bv.iter().map(|&v| v as f64).collect();
        check("matmul/a", &a, &r, |t| matmul(t, &b), |v| mm(v, &b64), 1e-2);
        check("matmul/b", &b, &r, |t| matmul(&a, t), |v| mm(&a64, v), 1e-2);
    }
}

#[test]
fn matmul_3x3_relative_error_below_1e4() {
    let mut p = Prng::new(33);
    let a = Tensor::param(p.normal_vec(9), &[3, 3]).unwrap();
    let b = Tensor::from_vec(p.normal_vec(9), &[3, 3]).unwrap();
    matmul(&a, &b).unwrap().sum().unwrap().backward().unwrap();
    let analytic = a.grad().unwrap();
    // d/da_ij sum(a b) = sum_l b_jl
    let bd = b.to_vec();
    for i in 0..3 {
        for j in 0..3 {
            let exact: f64 = (0..3).map(|l| bd[j * 3 + l] as f64).sum();
            let got = analytic[i * 3 + j] as f64;
            assert!((got - exact).abs() / exact.abs().max(1e-6) < 1e-4);
        }
    }
}

fn log_softmax_ce(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / n as f64
}

#[test]
fn softmax_cross_entropy_matches_formula() {
    let mut p = Prng::new(5);
    let vals = p.normal_vec(6);
    let labels = [2usize, 0];
    let t = Tensor::from_vec(vals.clone(), &[2, 3]).unwrap();
    let got = softmax_cross_entropy(&t, &labels).unwrap().item() as f64;
    let want = log_softmax_ce(&vals.iter().map(|&v| v as f64).collect::<Vec<_>>(), &labels, 3);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");

    for seed in 0..SEEDS {
        let mut p = Prng::new(400 + seed);
        let (n, k) = (1 + p.below(4), 2 + p.below(4));
        let labels: Vec<usize> = (0..n).map(|_| p.below(k)).collect();
        let x = Tensor::param(p.normal_vec(n * k), &[n, k]).unwrap();
        let l2 = labels.clone();
        check(
            "softmax_ce",
            &x,
            &[1.0],
            |t| softmax_cross_entropy(t, &l2),
            |v| vec![log_softmax_ce(v, &labels, k)],
            1e-2,
        );
    }
}

#[test]
fn pooling_and_layout_ops() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(500 + seed);
        let (n, c) = (1 + p.below(2), 2 * (1 + p.below(2)));
        let (h, w) = (2 * (1 + p.below(3)), 2 * (1 + p.below(3)));
        let len = n * c * h * w;
        let x = Tensor::param(p.normal_vec(len), &[n, c, h, w]).unwrap();
        let r = |p: &mut Prng, m: usize| -> Vec<f64> { p.normal_vec(m).into_iter().map(f64::from).collect() };

        let pool_ref = move |v: &[f64]| {
            let mut out = Vec::new();
            for plane in 0..n * c {
                for y in 0..h / 2 {
                    for xo in 0..w / 2 {
                        let i = plane * h * w + 2 * y * w + 2 * xo;
                        out.push((v[i] + v[i + 1] + v[i + w] + v[i + w + 1]) / 4.0);
                    }
                }
            }
            out
        };
        let rr = r(&mut p, len / 4);
        check("avg_pool2x2", &x, &rr, avg_pool2x2, pool_ref, 1e-2);

        let rr = r(&mut p, len);
        let squeeze_ref = move |v: &[f64]| {
            let mut out = Vec::new();
            for b in 0..n {
                for ch in 0..c {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        for y in 0..h / 2 {
                            for xo in 0..w / 2 {
                                out.push(v[((b * c + ch) * h + 2 * y + dy) * w + 2 * xo + dx]);
                            }
                        }
                    }
                }
            }
            out
        };
        check("squeeze2x2", &x, &rr, |t| t.squeeze2x2(), squeeze_ref, 1e-2);
        let sq = Tensor::param(p.normal_vec(len), &[n, 4 * c, h / 2, w / 2]).unwrap();
        let sq_copy = sq.detach();
        let rr = r(&mut p, len);
        // unsqueeze(v) is the unique u with squeeze(u) = v
        check(
            "unsqueeze2x2",
            &sq,
            &rr,
            |t| t.unsqueeze2x2(),
            move |v| {
                let _ = &sq_copy;
                let idx = squeeze_ref(&(0..len).map(|i| i as f64).collect::<Vec<_>>());
                let mut out = vec![0.0; len];
                for (o, &src) in idx.iter().enumerate() {
                    out[src as usize] = v[o];
                }
                out
            },
            1e-2,
        );

        let half = c / 2;
        let rr = r(&mut p, len / 2);
        let inner = h * w;
        check(
            "narrow_channels",
            &x,
            &rr,
            |t| t.narrow_channels(half, half),
            move |v| {
                (0..n)
                    .flat_map(|b| v[(b * c + half) * inner..(b * c + c) * inner].to_vec())
                    .collect()
            },
            1e-2,
        );

        let other = Tensor::from_vec(p.normal_vec(n * inner), &[n, 1, h, w]).unwrap();
        let other_v: Vec<f64> = f64s(&other);
        let rr = r(&mut p, len + n * inner);
        check(
            "concat_channels",
            &x,
            &rr,
            |t| Tensor::concat_channels(&[other.clone(), t.clone()]),
            move |v| {
                (0..n)
                    .flat_map(|b| {
                        let mut row = other_v[b * inner..(b + 1) * inner].to_vec();
                        row.extend_from_slice(&v[b * c * inner..(b + 1) * c * inner]);
                        row
                    })
                    .collect()
            },
            1e-2,
        );

        let rr = r(&mut p, n);
        check(
            "sum_per_sample",
            &x,
            &rr,
            |t| t.sum_per_sample(),
            move |v| v.chunks(len / n).map(|ch| ch.iter().sum()).collect(),
            1e-2,
        );

        let vch = Tensor::param(p.normal_vec(c), &[c]).unwrap();
        let rr = r(&mut p, len);
        check(
            "expand_channels",
            &vch,
            &rr,
            |t| t.expand_channels(&[n, c, h, w]),
            move |v| (0..len).map(|i| v[(i / inner) % c]).collect(),
            1e-2,
        );

        let (oh, ow) = (h + 1 + p.below(3), w + p.below(3));
        let rr = r(&mut p, n * c * oh * ow);
        check(
            "resize_nearest",
            &x,
            &rr,
            |t| t.resize_nearest(oh, ow),
            move |v| {
                let mut out = Vec::new();
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            out.push(v[plane * inner + (y * h / oh) * w + xo * w / ow]);
                        }
                    }
                }
                out
            },
            1e-2,
        );

        let rr = r(&mut p, len);
        check("reshape", &x, &rr, |t| t.reshape(&[len]), |v| v.to_vec(), 1e-2);
        let rr = r(&mut p, len / n);
        check("select", &x, &rr, |t| t.select(n - 1), move |v| v[(n - 1) * len / n..].to_vec(), 1e-2);
        let rr = r(&mut p, 2 * len);
        check(
            "stack",
            &x,
            &rr,
            |t| Tensor::stack(&[t.clone(), t.clone()]),
            |v| [v.to_vec(), v.to_vec()].concat(),
            1e-2,
        );
    }
}

fn det3(m: &[f64]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
}

fn inv3(m: &[f64]) -> Vec<f64> {
    let d = det3(m);
    let c = |a: usize, b: usize, cc: usize, dd: usize| m[a] * m[b] - m[cc] * m[dd];
    vec![
        c(4, 8, 5, 7) / d,
        -c(1, 8, 2, 7) / d,
        c(1, 5, 2, 4) / d,
        -c(3, 8, 5, 6) / d,
        c(0, 8, 2, 6) / d,
        -c(0, 5, 2, 3) / d,
        c(3, 7, 4, 6) / d,
        -c(0, 7, 1, 6) / d,
        c(0, 4, 1, 3) / d,
    ]
}

#[test]
fn determinant_and_inverse_gradients() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(600 + seed);
        let mut v: Vec<f32> = p.normal_vec(9).iter().map(|x| 0.5 * x).collect();
        for i in 0..3 {
            v[i * 3 + i] += 2.0;
        }
        let a = Tensor::param(v.clone(), &[3, 3]).unwrap();
        let value = log_abs_det(&a).unwrap().item() as f64;
        let want = det3(&v.iter().map(|&x| x as f64).collect::<Vec<_>>()).abs().ln();
        assert!((value - want).abs() < 1e-5);
        check("log_abs_det", &a, &[1.0], log_abs_det, |m| vec![det3(m).abs().ln()], 1e-3);
        let r: Vec<f64> = p.normal_vec(9).into_iter().map(f64::from).collect();
        check("inverse", &a, &r, inverse, inv3, 1e-3);
    }
}

#[test]
fn backward_accumulates_until_reset() {
    let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    let loss = a.mul(&a).unwrap().sum().unwrap();
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
    loss.backward().unwrap();
    assert_eq!(a.grad().unwrap(), vec![4.0, 8.0]);
    a.zero_grad();
    assert!(a.grad().is_none());
    let b = Tensor::param(vec![0.0; 4], &[2, 2]).unwrap();
    b.sum().unwrap().backward().unwrap();
    assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(a.mul_scalar(2.0).unwrap().backward().is_err());
}

fn composite_ref(x: &[f64], k: &[f64], wl: &[f64], labels: &[usize]) -> f64 {
    let conv = conv_ref(x, k, &[0.0; 3], [2, 1, 4, 4, 3, 3, 3, 1]);
    let act: Vec<f64> = conv.iter().map(|v| v.tanh()).collect();
    let mut pooled = Vec::new();
    for plane in 0..6 {
        for y in 0..2 {
            for xo in 0..2 {
                let i = plane * 16 + 2 * y * 4 + 2 * xo;
                pooled.push((act[i] + act[i + 1] + act[i + 4] + act[i + 5]) / 4.0);
            }
        }
    }
    let mut logits = vec![0.0; 6];
    for b in 0..2 {
        for j in 0..3 {
            logits[b * 3 + j] = (0..12).map(|l| pooled[b * 12 + l] * wl[l * 3 + j]).sum();
        }
    }
    log_softmax_ce(&logits, labels, 3)
}

/// conv -> tanh -> pool -> linear -> cross-entropy.
#[test]
fn composite_graph_matches_reference() {
    for seed in 0..SEEDS {
        let mut p = Prng::new(700 + seed);
        let xv = p.uniform_vec(2 * 4 * 4, 0.0, 1.0);
        let x = Tensor::from_vec(xv.clone(), &[2, 1, 4, 4]).unwrap();
        let kv: Vec<f32> = p.normal_vec(3 * 9).iter().map(|v| v * 0.5).collect();
        let wv: Vec<f32> = p.normal_vec(12 * 3).iter().map(|v| v * 0.5).collect();
        let k = Tensor::param(kv.clone(), &[3, 1, 3, 3]).unwrap();
        let wl = Tensor::param(wv.clone(), &[12, 3]).unwrap();
        let labels = [p.below(3), p.below(3)];
        let forward = |k: &Tensor, wl: &Tensor| -> Result<Tensor> {
            let h = conv2d(&x, k, None, 1, 1)?.tanh()?;
            let h = avg_pool2x2(&h)?.reshape(&[2, 12])?;
            softmax_cross_entropy(&matmul(&h, wl)?, &labels)
        };
        let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let (x64, k64, w64) = (to64(&xv), to64(&kv), to64(&wv));
        check("composite/kernel", &k, &[1.0], |t| forward(t, &wl), |v| vec![composite_ref(&x64, v, &w64, &labels)], 1e-3);
        check("composite/linear", &wl, &[1.0], |t| forward(&k, t), |v| vec![composite_ref(&x64, &k64, v, &labels)], 1e-3);
    }
}

/// finite_diff_grad on the engine's own f32 forward agrees with backward().
#[test]
fn finite_differences_agree_with_backward_on_two_layer_net() {
    let mut p = Prng::new(77);
    let x = Tensor::from_vec(p.normal_vec(4 * 5), &[4, 5]).unwrap();
    let w1 = Tensor::param(p.normal_vec(5 * 6).iter().map(|v| v * 0.5).collect(), &[5, 6]).unwrap();
    let w2 = Tensor::param(p.normal_vec(6 * 3).iter().map(|v| v * 0.5).collect(), &[6, 3]).unwrap();
    let labels = [0usize, 2, 1, 1];
    let forward = || -> Result<Tensor> {
        let h = matmul(&x, &w1)?.tanh()?;
        softmax_cross_entropy(&matmul(&h, &w2)?, &labels)
    };
    forward().unwrap().backward().unwrap();
    for leaf in [&w1, &w2] {
        let analytic = leaf.grad().unwrap();
        let numeric = finite_diff_grad(|_| Ok(forward()?.item() as f64), leaf, 1e-2).unwrap().to_vec();
        // norm-wise: single f32 coordinates carry ~1e-5 absolute rounding noise
        let diff: f32 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f32>().sqrt();
        let norm: f32 = analytic.iter().map(|a| a * a).sum::<f32>().sqrt();
        assert!(diff / norm < 1e-3, "norm-wise rel err {}", diff / norm);
    }
}
