use bdc_tensor::{check_gradients, ConvGeometry, Mask, Primitive, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `y` to a scalar through a fixed random projection so that every
/// output coordinate carries a distinct weight.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, t.shape(y), -1.0, 1.0);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn check(name: &str, params: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let err = check_gradients(f, &params, STEP).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn every_primitive_passes_the_finite_difference_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut covered = Vec::new();

    covered.push(Primitive::MatMul);
    check(
        "matmul",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4, 2], -1.0, 1.0)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        },
    );

    for (prim, name) in [(Primitive::Add, "add"), (Primitive::Sub, "sub"), (Primitive::Mul, "mul")] {
        covered.push(prim);
        check(
            name,
            vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)],
            move |t, v| {
                let y = match prim {
                    Primitive::Add => t.add(v[0], v[1])?,
                    Primitive::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                project(t, y, 2)
            },
        );
    }

    covered.push(Primitive::AddRow);
    check(
        "add_row",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4], -1.0, 1.0)],
        |t, v| {
            let y = t.add_row(v[0], v[1])?;
            project(t, y, 3)
        },
    );

    covered.push(Primitive::MulRow);
    check(
        "mul_row",
        vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), rand_tensor(&mut rng, &[4], -1.0, 1.0)],
        |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            project(t, y, 4)
        },
    );

    covered.push(Primitive::Scale);
    check("scale", vec![rand_tensor(&mut rng, &[5], -1.0, 1.0)], |t, v| {
        let y = t.scale(v[0], -0.37)?;
        project(t, y, 5)
    });

    covered.push(Primitive::Exp);
    check("exp", vec![rand_tensor(&mut rng, &[5], -1.0, 1.0)], |t, v| {
        let y = t.exp(v[0])?;
        project(t, y, 6)
    });

    covered.push(Primitive::Ln);
    check("ln", vec![rand_tensor(&mut rng, &[5], 0.5, 2.0)], |t, v| {
        let y = t.ln(v[0])?;
        project(t, y, 7)
    });

    covered.push(Primitive::Sqrt);
    check("sqrt", vec![rand_tensor(&mut rng, &[5], 0.5, 2.0)], |t, v| {
        let y = t.sqrt(v[0])?;
        project(t, y, 8)
    });

    covered.push(Primitive::Gelu);
    check("gelu", vec![rand_tensor(&mut rng, &[6], -3.0, 3.0)], |t, v| {
        let y = t.gelu(v[0])?;
        project(t, y, 9)
    });

    covered.push(Primitive::MaskedSoftmax);
    let mask = Mask::from_rows(&[
        &[true, false, true, true],
        &[false, true, false, false],
        &[true, true, true, true],
    ]);
    check("masked_softmax", vec![rand_tensor(&mut rng, &[3, 4], -2.0, 2.0)], move |t, v| {
        let y = t.masked_softmax(v[0], &mask)?;
        project(t, y, 10)
    });

    covered.push(Primitive::LayerNorm);
    check("layer_norm", vec![rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)], |t, v| {
        let y = t.layer_norm(v[0], 1e-5)?;
        project(t, y, 11)
    });

    covered.push(Primitive::Im2Col);
    let geom = ConvGeometry { height: 5, width: 4, channels: 2, kernel: 3, stride: 2, padding: 1 };
    check("im2col", vec![rand_tensor(&mut rng, &[5, 4, 2], -1.0, 1.0)], move |t, v| {
        let y = t.im2col(v[0], geom)?;
        project(t, y, 12)
    });

    covered.push(Primitive::Sum);
    check("sum", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    });

    covered.push(Primitive::Mean);
    check("mean", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    });

    covered.push(Primitive::Reshape);
    check("reshape", vec![rand_tensor(&mut rng, &[2, 6], -1.0, 1.0)], |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        let w = t.constant(Tensor::from_fn(&[4, 2], |i| i as f64 - 3.5));
        let z = t.matmul(y, w)?;
        project(t, z, 13)
    });

    covered.push(Primitive::Transpose);
    check("transpose", vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y, 14)
    });

    covered.push(Primitive::Concat);
    check(
        "concat",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[1, 3], -1.0, 1.0)],
        |t, v| {
            let rows = t.concat(&[v[0], v[1]], 0)?;
            let tr = t.transpose(rows)?;
            let cols = t.concat(&[tr, tr], 1)?;
            project(t, cols, 15)
        },
    );

    covered.push(Primitive::SliceRows);
    check("slice_rows", vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| {
        let y = t.slice_rows(v[0], 1, 2)?;
        project(t, y, 16)
    });

    covered.push(Primitive::SliceCols);
    check("slice_cols", vec![rand_tensor(&mut rng, &[3, 5], -1.0, 1.0)], |t, v| {
        let y = t.slice_cols(v[0], 2, 2)?;
        project(t, y, 17)
    });

    covered.push(Primitive::Embedding);
    check("embedding", vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)], |t, v| {
        let y = t.embedding(v[0], &[2, 0, 2, 3])?;
        project(t, y, 18)
    });

    covered.push(Primitive::L1Loss);
    check(
        "l1_loss",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)],
        |t, v| t.l1_loss(v[0], v[1]),
    );

    covered.push(Primitive::MseLoss);
    check(
        "mse_loss",
        vec![rand_tensor(&mut rng, &[2, 3], -1.0, 1.0), rand_tensor(&mut rng, &[2, 3], -1.0, 1.0)],
        |t, v| t.mse_loss(v[0], v[1]),
    );

    covered.push(Primitive::Leaf);
    for p in Primitive::ALL {
        assert!(covered.contains(&p), "{p:?} has no gradient check");
    }
}

#[test]
fn masked_softmax_uniform_row() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let y = t.masked_softmax(x, &Mask::full(1, 2)).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_two_visible_terms() {
    // Independent scalar evaluation of a two-term softmax over logits 1 and 9.
    let e8 = 8.0f64.exp();
    let expect = [1.0 / (1.0 + e8), 0.0, e8 / (1.0 + e8)];

    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, 3], vec![1.0, 5.0, 9.0]).unwrap());
    let y = t.masked_softmax(x, &Mask::from_rows(&[&[true, false, true]])).unwrap();
    let out = t.value(y).data();
    for (o, e) in out.iter().zip(expect) {
        assert!((o - e).abs() < 1e-15, "{o} vs {e}");
    }
    assert_eq!(out[1].to_bits(), 0.0f64.to_bits());
}

#[test]
fn full_mask_equals_unmasked_softmax_bitwise() {
    let logits = [0.25f64, -3.0, 1.5, 7.0, 0.0];
    let mut plain = [0.0; 5];
    bdc_tensor::kernels::softmax_row(&logits, &mut plain);
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new(&[1, 5], logits.to_vec()).unwrap());
    let y = t.masked_softmax(x, &Mask::full(1, 5)).unwrap();
    for (a, b) in t.value(y).data().iter().zip(plain) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn two_layer_perceptron_gradients() {
    // 2 -> 3 -> 2 perceptron: 6 + 3 + 6 + 2 = 17 parameters.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = vec![
        rand_tensor(&mut rng, &[2, 3], -1.0, 1.0),
        rand_tensor(&mut rng, &[3], -0.5, 0.5),
        rand_tensor(&mut rng, &[3, 2], -1.0, 1.0),
        rand_tensor(&mut rng, &[2], -0.5, 0.5),
    ];
    assert_eq!(params.iter().map(Tensor::numel).sum::<usize>(), 17);
    let input = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let target = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let err = check_gradients(
        |t, v| {
            let x = t.constant(input.clone());
            let h = t.matmul(x, v[0])?;
            let h = t.add_row(h, v[1])?;
            let h = t.gelu(h)?;
            let y = t.matmul(h, v[2])?;
            let y = t.add_row(y, v[3])?;
            let tg = t.constant(target.clone());
            t.mse_loss(y, tg)
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn masked_attention_block_gradients() {
    // 3 queries attending over 4 keys with a partial mask.
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mask = Mask::from_rows(&[
        &[true, true, false, false],
        &[true, true, true, false],
        &[false, true, true, true],
    ]);
    let params = vec![
        rand_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 4], -1.0, 1.0),
        rand_tensor(&mut rng, &[4, 4], -1.0, 1.0),
    ];
    let err = check_gradients(
        |t, v| {
            let kt = t.transpose(v[1])?;
            let s = t.matmul(v[0], kt)?;
            let s = t.scale(s, 0.5)?;
            let p = t.masked_softmax(s, &mask)?;
            let o = t.matmul(p, v[2])?;
            project(t, o, 99)
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::<f64>::new();
    let x = t.constant(rand_tensor(&mut rng, &[6, 16], -5.0, 9.0));
    let y = t.layer_norm(x, 1e-9).unwrap();
    for r in 0..6 {
        let row = t.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn conv2d_shapes_and_values() {
    // 1-channel 4x4 ramp, 3x3 ones kernel, stride 2, pad 1 -> 2x2 window sums.
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn(&[4, 4, 1], |i| i as f64));
    let w = t.constant(Tensor::full(&[9, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let geom = ConvGeometry { height: 4, width: 4, channels: 1, kernel: 3, stride: 2, padding: 1 };
    let y = t.conv2d(x, w, b, geom).unwrap();
    assert_eq!(t.shape(y), &[2, 2, 1]);
    // top-left window covers rows 0..=1, cols 0..=1: 0+1+4+5
    assert_eq!(t.value(y).data()[0], 10.0);
    // window centred at (2,2) covers rows 1..=3, cols 1..=3
    let expect: f64 = [5, 6, 7, 9, 10, 11, 13, 14, 15].iter().map(|&v| v as f64).sum();
    assert_eq!(t.value(y).data()[3], expect);
}

#[test]
fn repeated_forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::from_fn(&[8, 16], |_| rng.gen_range(-1.0..1.0)));
        let b = t.constant(Tensor::from_fn(&[16, 8], |_| rng.gen_range(-1.0..1.0)));
        let c = t.matmul(a, b).unwrap();
        let c = t.gelu(c).unwrap();
        let c = t.layer_norm(c, 1e-5).unwrap();
        t.value(c).clone()
    };
    assert!(run().bit_eq(&run()));
}

proptest! {
    #[test]
    fn masked_softmax_equals_softmax_over_visible_keys(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let n = logits.len();
        let mut visible: Vec<bool> = bits[..n].to_vec();
        visible[0] = true;
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, n], logits.clone()).unwrap());
        let y = t.masked_softmax(x, &Mask::new(1, n, visible.clone())).unwrap();
        let out = t.value(y).data().to_vec();

        let kept: Vec<f64> = logits.iter().zip(&visible).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        let mut dense = vec![0.0; kept.len()];
        bdc_tensor::kernels::softmax_row(&kept, &mut dense);
        let mut it = dense.into_iter();
        for (o, &m) in out.iter().zip(&visible) {
            if m {
                prop_assert_eq!(o.to_bits(), it.next().unwrap().to_bits());
            } else {
                prop_assert_eq!(o.to_bits(), 0.0f64.to_bits());
            }
        }
    }
}
