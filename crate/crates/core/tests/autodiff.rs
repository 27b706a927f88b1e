use bdmnn::tensor::{grad_check, Tape, Tensor, Var, DEFAULT_FD_EPS};
use bdmnn::Result;
use proptest::prelude::*;

const OP_TOL: f64 = 1e-4;

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-1.5f64..1.5, n)
        .prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

/// Contracts an output against fixed pseudo-random weights so every output
/// coordinate carries a distinct upstream gradient.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(y), |i| ((i as f64) * 0.7311).sin() + 0.1);
    let w = tape.constant(w);
    let m = tape.mul(y, w)?;
    tape.sum(m)
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, params: &[Tensor]) {
    let rep = grad_check(f, params, DEFAULT_FD_EPS, OP_TOL).unwrap();
    assert!(
        rep.passed,
        "max rel err {} at {:?}",
        rep.max_rel_err, rep.worst
    );
}

/// Keeps inputs away from the ReLU kink, where finite differences straddle it.
fn off_kink(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let d = t
        .into_data()
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.2 } else { v })
        .collect();
    Tensor::new(shape, d).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn conv2d(x in tensor(&[2, 2, 4, 5]), w in tensor(&[3, 2, 3, 3]), b in tensor(&[3])) {
        check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 1)?; probe(t, y) }, &[x, w, b]);
    }

    #[test]
    fn conv2d_wide_kernel(x in tensor(&[1, 1, 5, 5]), w in tensor(&[2, 1, 5, 5]), b in tensor(&[2])) {
        check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 2)?; probe(t, y) }, &[x, w, b]);
    }

    #[test]
    fn conv2d_kernel_wider_than_grid(x in tensor(&[1, 2, 2, 3]), w in tensor(&[1, 2, 9, 9]), b in tensor(&[1])) {
        check(|t, v| { let y = t.conv2d(v[0], v[1], v[2], 4)?; probe(t, y) }, &[x, w, b]);
    }

    #[test]
    fn relu(x in tensor(&[3, 4])) {
        check(|t, v| { let y = t.relu(v[0])?; probe(t, y) }, &[off_kink(x)]);
    }

    #[test]
    fn sigmoid_and_tanh(x in tensor(&[3, 4])) {
        check(|t, v| { let y = t.sigmoid(v[0])?; probe(t, y) }, std::slice::from_ref(&x));
        check(|t, v| { let y = t.tanh(v[0])?; probe(t, y) }, &[x]);
    }

    #[test]
    fn elementwise(a in tensor(&[2, 3]), b in tensor(&[2, 3])) {
        check(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) }, &[a.clone(), b]);
        check(|t, v| { let y = t.scale(v[0], -2.5)?; probe(t, y) }, &[a]);
    }

    #[test]
    fn softmax(x in tensor(&[2, 3, 4])) {
        check(|t, v| { let y = t.softmax_lastdim(v[0])?; probe(t, y) }, &[x]);
    }

    #[test]
    fn matmul_and_transpose(a in tensor(&[2, 3, 4]), b in tensor(&[2, 4, 2])) {
        check(|t, v| { let y = t.matmul_batched(v[0], v[1])?; probe(t, y) }, &[a.clone(), b]);
        check(|t, v| { let y = t.transpose_last2(v[0])?; probe(t, y) }, &[a]);
    }

    #[test]
    fn layer_norm(x in tensor(&[2, 3, 4]), g in tensor(&[3]), s in tensor(&[3])) {
        check(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1, 1e-5)?; probe(t, y) }, &[x, g, s]);
    }

    #[test]
    fn reshape_concat_slice(a in tensor(&[2, 2, 3]), b in tensor(&[2, 1, 3])) {
        check(
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 2)?;
                let r = t.reshape(s, &[4, 3])?;
                probe(t, r)
            },
            &[a, b],
        );
    }

    #[test]
    fn mse_loss(p in tensor(&[2, 5]), target in tensor(&[2, 5])) {
        check(|t, v| t.mse_loss(v[0], &target), &[p]);
    }

    #[test]
    fn softmax_rows_are_distributions(x in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(vec![3, 4], x).unwrap());
        let y = t.softmax_lastdim(v).unwrap();
        for row in t.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in proptest::collection::vec(-5.0f64..5.0, 4), c in -100.0f64..100.0) {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![4], x.clone()).unwrap());
        let b = t.constant(Tensor::new(vec![4], x.iter().map(|v| v + c).collect()).unwrap());
        let (ya, yb) = (t.softmax_lastdim(a).unwrap(), t.softmax_lastdim(b).unwrap());
        prop_assert!(t.value(ya).max_abs_diff(t.value(yb)).unwrap() < 1e-12);
    }
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = sum(x*x + x) reuses x three times; df/dx = 2x + 1.
    let x0 = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let x = t.param(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let y = t.add(sq, x).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(x).unwrap();
    for (gi, xi) in g.data().iter().zip(x0.data()) {
        assert_eq!(*gi, 2.0 * xi + 1.0);
    }
}

#[test]
fn full_model_gradients_for_every_variant() {
    use bdmnn::model::{grad_check_model, EncoderVariant, ModelConfig, TsEncoder};
    for v in EncoderVariant::ALL {
        for ts in TsEncoder::ALL {
            let cfg = ModelConfig {
                encoder_variant: v,
                ts_encoder: ts,
                depth: 3,
                window: 4,
                c_in: 1,
                c_h: 2,
                c_out: 2,
                height: 5,
                width: 6,
                kernel: 3,
                qkv_kernel: None,
                c_hid: Some(2),
                attn_scale: v == EncoderVariant::Bidepth,
                seed: 3,
            };
            let rep = grad_check_model(&cfg, 2, 1, DEFAULT_FD_EPS, 1e-3).unwrap();
            assert!(
                rep.passed,
                "{}: max rel err {} at {:?}",
                cfg.label(),
                rep.max_rel_err,
                rep.worst
            );
        }
    }
}

/// Zero-padded stride-1 cross-correlation written as the textbook sum.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (nb, ci, h, wd, co, k) = (xs[0], xs[1], xs[2], xs[3], ws[0], ws[2]);
    let (ho, wo) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = Vec::new();
    for n in 0..nb {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (
                                    y as isize + ky as isize - pad as isize,
                                    xx as isize + kx as isize - pad as isize,
                                );
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                                acc += w.data()[((o * ci + c) * k + ky) * k + kx] * xv;
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv2d_matches_naive_sum(
        (h, w, k) in (1usize..6, 1usize..6, 0usize..5).prop_map(|(h, w, k)| (h, w, 2 * k + 1)),
        seed in 0u64..1000,
    ) {
        let val = |i: usize, s: u64| ((i as f64 + 1.0) * 0.37 + s as f64 * 0.11).sin();
        let x = Tensor::from_fn(&[2, 2, h, w], |i| val(i, seed));
        let wt = Tensor::from_fn(&[3, 2, k, k], |i| val(i, seed + 7));
        let b = Tensor::from_fn(&[3], |i| val(i, seed + 13));
        let pad = k / 2;
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, pad).unwrap();
        let want = naive_conv(&x, &wt, &b, pad);
        for (a, e) in t.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
        prop_assert_eq!(t.value(y).numel(), want.len());
    }
}
