use proptest::prelude::*;
use scrl_core::geometry::Box;
use scrl_core::rng::seeded;
use scrl_core::tensor::gradcheck::grad_check;
use scrl_core::tensor::serialize::Checkpoint;
use scrl_core::tensor::{Graph, RoiSpec, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// Bilinear value as a sum of tent kernels over every cell (cell centers at
/// `i + 0.5`, sample point clamped to the span of centers).
fn tent_sample(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for j in 0..h {
        for i in 0..w {
            let k = (1.0 - (u - i as f64).abs()).max(0.0) * (1.0 - (v - j as f64).abs()).max(0.0);
            acc += k * plane[j * w + i];
        }
    }
    acc
}

fn roi_oracle(f: &Tensor, rois: &[RoiSpec], s: usize) -> Vec<f64> {
    let sh = f.shape();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let mut out = Vec::new();
    for r in rois {
        for ch in 0..c {
            let base = (r.batch_index * c + ch) * h * w;
            let plane = &f.data()[base..base + h * w];
            let mut acc = 0.0;
            for iy in 0..s {
                for ix in 0..s {
                    let px = r.rect.x + (ix as f64 + 0.5) * r.rect.w / s as f64;
                    let py = r.rect.y + (iy as f64 + 0.5) * r.rect.h / s as f64;
                    acc += tent_sample(plane, w, h, px, py);
                }
            }
            out.push(acc / (s * s) as f64);
        }
    }
    out
}

fn roi_case() -> impl Strategy<Value = (Tensor, Vec<RoiSpec>)> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6)
        .prop_flat_map(|(n, c, h, w)| {
            let roi = (0..n, 0.0..1.0f64, 0.0..1.0f64, 0.001..1.0f64, 0.001..1.0f64).prop_map(move |(b, fx, fy, fw, fh)| {
                let x = fx * w as f64;
                let y = fy * h as f64;
                RoiSpec {
                    batch_index: b,
                    rect: Box {
                        x,
                        y,
                        w: ((w as f64 - x) * fw).max(1e-6),
                        h: ((h as f64 - y) * fh).max(1e-6),
                    },
                }
            });
            (tensor(vec![n, c, h, w]), prop::collection::vec(roi, 1..5))
        })
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = (y * stride + dy) as i64 - pad as i64;
                                let sx = (xx * stride + dx) as i64 - pad as i64;
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                acc += x.data()[((b * ci + i) * h + sy as usize) * w + sx as usize]
                                    * k.data()[((o * ci + i) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn roi_align_matches_tent_oracle((f, rois) in roi_case(), s in 1usize..4) {
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let y = g.roi_align_1x1(x, &rois, s).unwrap();
        prop_assert!(max_abs_diff(g.value(y).data(), &roi_oracle(&f, &rois, s)) < 1e-9);
    }

    #[test]
    fn roi_align_is_linear_in_features((a, rois) in roi_case(), seed in any::<u64>(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
        use rand::Rng;
        let mut r = seeded(seed);
        let b = Tensor::new(a.shape(), (0..a.len()).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let mix = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
        let pool = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = g.roi_align_1x1(v, &rois, 2).unwrap();
            g.value(y).data().to_vec()
        };
        let (pa, pb, pm) = (pool(&a), pool(&b), pool(&mix));
        for i in 0..pm.len() {
            prop_assert!((pm[i] - (alpha * pa[i] + beta * pb[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_matches_loop_oracle(n in 1usize..3, ci in 1usize..4, co in 1usize..4, h in 3usize..8, w in 3usize..8,
                                stride in 1usize..3, pad in 0usize..2, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = seeded(seed);
        let mut t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = t(&[n, ci, h, w]);
        let k = t(&[co, ci, 3, 3]);
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        prop_assert!(max_abs_diff(g.value(y).data(), &conv_oracle(&x, &k, stride, pad)) < 1e-9);
    }

    #[test]
    fn batch_norm_matches_moment_oracle(x in tensor(vec![3, 2, 2, 2]), gamma in tensor(vec![2]), beta in tensor(vec![2])) {
        let mut g = Graph::new();
        let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
        let (y, stats) = g.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
        let mut expect = vec![0.0; x.len()];
        for ch in 0..2 {
            let idx: Vec<usize> = (0..3).flat_map(|b| (0..4).map(move |i| (b * 2 + ch) * 4 + i)).collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / 12.0;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / 12.0;
            prop_assert!((stats.mean[ch] - mean).abs() < 1e-12);
            prop_assert!((stats.var[ch] - var * 12.0 / 11.0).abs() < 1e-12);
            for &i in &idx {
                expect[i] = gamma.data()[ch] * (x.data()[i] - mean) / (var + 1e-5).sqrt() + beta.data()[ch];
            }
        }
        prop_assert!(max_abs_diff(g.value(y).data(), &expect) < 1e-9);
    }

    #[test]
    fn linear_relu_pool_match_oracles(x in tensor(vec![3, 4]), w in tensor(vec![2, 4]), b in tensor(vec![2]), m in tensor(vec![2, 3, 2, 2])) {
        let mut g = Graph::new();
        let (xv, wv, bv, mv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()), g.constant(m.clone()));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        let r = g.relu(y);
        let p = g.global_avg_pool(mv).unwrap();
        let mut lin = vec![0.0; 6];
        for i in 0..3 {
            for o in 0..2 {
                lin[i * 2 + o] = b.data()[o] + (0..4).map(|k| x.data()[i * 4 + k] * w.data()[o * 4 + k]).sum::<f64>();
            }
        }
        prop_assert!(max_abs_diff(g.value(y).data(), &lin) < 1e-9);
        let relu: Vec<f64> = lin.iter().map(|v| v.max(0.0)).collect();
        prop_assert!(max_abs_diff(g.value(r).data(), &relu) < 1e-9);
        let pool: Vec<f64> = m.data().chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
        prop_assert!(max_abs_diff(g.value(p).data(), &pool) < 1e-9);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in tensor(vec![4, 6])) {
        let norms: Vec<f64> = x.data().chunks(6).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        prop_assume!(norms.iter().all(|n| *n > 1e-6));
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.l2_normalize(v);
        for row in g.value(y).data().chunks(6) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax(x in tensor(vec![3, 4]), labels in prop::collection::vec(0usize..4, 3)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = g.softmax_cross_entropy(v, &labels).unwrap();
        let expect = x.data().chunks(4).zip(&labels).map(|(row, &y)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[y]
        }).sum::<f64>() / 3.0;
        prop_assert!((g.value(l).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn conv_gradients_pass_finite_differences(seed in any::<u64>(), stride in 1usize..3) {
        use rand::Rng;
        let mut r = seeded(seed);
        let mut t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut params = vec![t(&[1, 2, 5, 5]), t(&[2, 2, 3, 3])];
        let rep = grad_check(&mut params, |p| {
            let mut g = Graph::new();
            let x = g.param(p[0].clone());
            let k = g.param(p[1].clone());
            let y = g.conv2d(x, k, stride, 1)?;
            let s = g.sum_squares(y);
            g.backward(s)?;
            Ok((g.value(s).item(), vec![g.grad_tensor(x), g.grad_tensor(k)]))
        }, 1e-5, None, seed)?;
        prop_assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn checkpoint_bytes_round_trip(meta in "[ -~]{0,40}", a in tensor(vec![2, 3]), b in tensor(vec![4])) {
        let ck = Checkpoint { meta, records: vec![("a".into(), a), ("b.c".into(), b)] };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

fn two_branch(x: &Tensor, left_first: bool) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let branch_a = |g: &mut Graph| {
        let r = g.relu(v);
        g.sum_squares(r)
    };
    let branch_b = |g: &mut Graph| {
        let n = g.l2_normalize(v);
        let s = g.scale(n, 3.0);
        g.sum_squares(s)
    };
    let (a, b) = if left_first {
        let a = branch_a(&mut g);
        (a, branch_b(&mut g))
    } else {
        let b = branch_b(&mut g);
        (branch_a(&mut g), b)
    };
    let total = g.add(a, b).unwrap();
    g.backward(total).unwrap();
    (g.value(total).item(), g.grad(v).unwrap().to_vec())
}

#[test]
fn graph_result_does_not_depend_on_build_order() {
    let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap();
    let (fa, ga) = two_branch(&x, true);
    let (fb, gb) = two_branch(&x, false);
    assert!((fa - fb).abs() < 1e-12);
    assert!(max_abs_diff(&ga, &gb) < 1e-12);
    assert_eq!(two_branch(&x, true), (fa, ga));
}

#[test]
fn roi_align_clamps_at_the_border() {
    let f = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let corner = RoiSpec {
        batch_index: 0,
        rect: Box { x: 0.0, y: 0.0, w: 0.2, h: 0.2 },
    };
    let whole = RoiSpec {
        batch_index: 0,
        rect: Box { x: 0.0, y: 0.0, w: 2.0, h: 2.0 },
    };
    let y = g.roi_align_1x1(x, &[corner, whole], 2).unwrap();
    // Samples inside the top-left half-cell clamp to the first center.
    assert_eq!(g.value(y).data()[0], 1.0);
    assert!((g.value(y).data()[1] - 2.5).abs() < 1e-12);
}
