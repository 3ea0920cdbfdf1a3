//! Kernels and gradients against independent brute-force oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqattn_tensor::gradcheck::check_graph;
use seqattn_tensor::ops::{self, Padding};
use seqattn_tensor::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Six nested loops over output row/col/channel and kernel row/col/channel.
fn naive_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let mut out = vec![0.0; out_h * out_w * cout];
    for oy in 0..out_h {
        for ox in 0..out_w {
            for co in 0..cout {
                let mut acc = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ci in 0..cin {
                            let y = (oy * stride + dy) as isize - pad_top as isize;
                            let xx = (ox * stride + dx) as isize - pad_left as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x.get(&[y as usize, xx as usize, ci]).unwrap()
                                * k.get(&[dy, dx, ci, co]).unwrap();
                        }
                    }
                }
                out[(oy * out_w + ox) * cout + co] = acc;
            }
        }
    }
    out
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_six_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[7, 7, 4]);
    let k = random(&mut rng, &[5, 5, 4, 8]);
    let y = ops::conv2d(&x, &k, Padding::Same, 1).unwrap();
    assert_eq!(y.shape(), &[7, 7, 8]);
    let expected = naive_conv(&x, &k, 2, 2, 1, 7, 7);
    assert!(max_abs_diff(y.data(), &expected) < 1e-6);
}

#[test]
fn strided_encoder_conv_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[9, 8, 3]);
    let k = random(&mut rng, &[3, 3, 3, 5]);
    // valid: (9-3)/2+1 = 4, (8-3)/2+1 = 3
    let y = ops::conv2d(&x, &k, Padding::Valid, 2).unwrap();
    assert_eq!(y.shape(), &[4, 3, 5]);
    assert!(max_abs_diff(y.data(), &naive_conv(&x, &k, 0, 0, 2, 4, 3)) < 1e-12);
    // same: ceil(9/2)=5 with total pad (4*2+3-9)=2 -> top 1; ceil(8/2)=4, pad (3*2+3-8)=1 -> left 0
    let y = ops::conv2d(&x, &k, Padding::Same, 2).unwrap();
    assert_eq!(y.shape(), &[5, 4, 5]);
    assert!(max_abs_diff(y.data(), &naive_conv(&x, &k, 1, 0, 2, 5, 4)) < 1e-12);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[5, 7]);
    let b = random(&mut rng, &[7, 3]);
    let c = ops::matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[5, 3]);
    assert!(max_abs_diff(c.data(), &naive_matmul(&a, &b)) < 1e-6);
}

#[test]
fn sigmoid_of_dot_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = random(&mut rng, &[1, 6]);
    let x = random(&mut rng, &[6, 1]);
    let report = check_graph(
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            let s = g.sigmoid(z);
            Ok(g.sum(s))
        },
        &[w, x],
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

/// Each differentiable op at 20 random points.
#[test]
fn every_op_agrees_with_finite_differences() {
    type Build = fn(&mut Graph<f64>, &[seqattn_tensor::Var]) -> seqattn_tensor::Result<seqattn_tensor::Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![3, 2], vec![3, 2]], |g, v| {
            let y = g.add(v[0], v[1])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("sub_mul", vec![vec![4], vec![4]], |g, v| {
            let d = g.sub(v[0], v[1])?;
            let y = g.mul(d, v[0])?;
            Ok(g.sum(y))
        }),
        ("affine_tanh", vec![vec![5]], |g, v| {
            let a = g.affine(v[0], 1.7, -0.3);
            let t = g.tanh(a);
            let t = g.mul(t, t)?;
            Ok(g.sum(t))
        }),
        ("sigmoid_log", vec![vec![5]], |g, v| {
            let s = g.sigmoid(v[0]);
            let l = g.log(s);
            Ok(g.mean(l))
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        }),
        ("conv_same", vec![vec![4, 4, 2], vec![3, 3, 2, 3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Padding::Same, 1)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        }),
        ("conv_strided", vec![vec![5, 6, 2], vec![3, 3, 2, 2]], |g, v| {
            let y = g.conv2d(v[0], v[1], Padding::Same, 2)?;
            let y = g.sigmoid(y);
            Ok(g.sum(y))
        }),
        ("max_pool", vec![vec![4, 5, 2]], |g, v| {
            let y = g.max_pool2d(v[0], 2)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        }),
        ("softmax", vec![vec![6], vec![6]], |g, v| {
            let p = g.softmax(v[0])?;
            let y = g.mul(p, v[1])?;
            Ok(g.sum(y))
        }),
        ("sum_axis", vec![vec![3, 4]], |g, v| {
            let s = g.sum_axis(v[0], 0)?;
            let s = g.mul(s, s)?;
            let m = g.mean_axis(v[0], 1)?;
            let m = g.tanh(m);
            let a = g.sum(s);
            let b = g.sum(m);
            g.add(a, b)
        }),
        ("max_axis", vec![vec![4, 3]], |g, v| {
            let m = g.max_axis(v[0], 0)?;
            let m = g.mul(m, m)?;
            Ok(g.sum(m))
        }),
        ("scale_rows_stack_reshape", vec![vec![3, 2], vec![3], vec![6]], |g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            let y = g.reshape(y, &[6])?;
            let s = g.stack(&[y, v[2]])?;
            let s = g.tanh(s);
            Ok(g.sum(s))
        }),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        }),
        ("clamp_interior", vec![vec![4]], |g, v| {
            let c = g.clamp(v[0], -5.0, 5.0);
            let c = g.mul(c, c)?;
            Ok(g.sum(c))
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, build) in cases {
        for point in 0..20 {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = check_graph(build, &inputs, 1e-5).unwrap();
            assert!(
                report.max_rel_error < 1e-5,
                "{name} point {point}: rel err {} at {} (analytic {}, numeric {})",
                report.max_rel_error,
                report.worst,
                report.analytic[report.worst],
                report.numeric[report.worst]
            );
        }
    }
}

#[test]
fn gradient_of_independent_sum_is_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&mut rng, &[3, 3]);
    let b = random(&mut rng, &[4]);

    let part_a = |g: &mut Graph<f64>, v| {
        let t = g.tanh(v);
        let t = g.mul(t, t).unwrap();
        g.sum(t)
    };
    let part_b = |g: &mut Graph<f64>, v| {
        let s = g.softmax(v).unwrap();
        let s = g.mul(s, v).unwrap();
        g.sum(s)
    };

    let mut g = Graph::new();
    let va = g.leaf(a.clone());
    let vb = g.leaf(b.clone());
    let la = part_a(&mut g, va);
    let lb = part_b(&mut g, vb);
    let total = g.add(la, lb).unwrap();
    let joint = g.backward(total).unwrap();

    let mut ga = Graph::new();
    let va2 = ga.leaf(a);
    let l = part_a(&mut ga, va2);
    let only_a = ga.backward(l).unwrap().wrt(va2);

    let mut gb = Graph::new();
    let vb2 = gb.leaf(b);
    let l = part_b(&mut gb, vb2);
    let only_b = gb.backward(l).unwrap().wrt(vb2);

    assert_eq!(joint.wrt(va), only_a);
    assert_eq!(joint.wrt(vb), only_b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn conv2d_random_instances(seed in any::<u64>(), h in 1usize..7, w in 1usize..7,
                               cin in 1usize..4, cout in 1usize..4, k in 0usize..3, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ksize = 2 * k + 1;
        let x = random(&mut rng, &[h, w, cin]);
        let kern = random(&mut rng, &[ksize, ksize, cin, cout]);
        let y = ops::conv2d(&x, &kern, Padding::Same, stride).unwrap();
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        prop_assert_eq!(y.shape(), &[oh, ow, cout]);
        let pt = ((oh - 1) * stride + ksize).saturating_sub(h) / 2;
        let pl = ((ow - 1) * stride + ksize).saturating_sub(w) / 2;
        prop_assert!(max_abs_diff(y.data(), &naive_conv(&x, &kern, pt, pl, stride, oh, ow)) < 1e-5);
    }

    #[test]
    fn matmul_random_instances(seed in any::<u64>(), m in 1usize..8, k in 1usize..8, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let c = ops::matmul(&a, &b).unwrap();
        prop_assert!(max_abs_diff(c.data(), &naive_matmul(&a, &b)) < 1e-5);
    }

    #[test]
    fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f32..50.0, 1..64)) {
        let y = ops::softmax(&Tensor::from_slice(&logits).unwrap()).unwrap();
        let total: f64 = y.data().iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn same_conv_preserves_extent(h in 1usize..12, w in 1usize..12, k in 0usize..5) {
        let ksize = 2 * k + 1;
        let x = Tensor::<f32>::zeros(&[h, w, 2]).unwrap();
        let kern = Tensor::<f32>::zeros(&[ksize, ksize, 2, 3]).unwrap();
        let y = ops::conv2d(&x, &kern, Padding::Same, 1).unwrap();
        prop_assert_eq!(y.shape(), &[h, w, 3]);
    }

    #[test]
    fn stns_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::from_fn(&shape, |_| rng.gen_range(-10.0..10.0)).unwrap();
        let mut buf = Vec::new();
        seqattn_tensor::stns::write(&t, &mut buf).unwrap();
        prop_assert_eq!(seqattn_tensor::stns::decode::<f32>(&buf).unwrap(), t);
    }
}
