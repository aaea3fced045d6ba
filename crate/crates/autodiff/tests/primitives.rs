use bridging_autodiff::{
    finite_difference_check, AutodiffError, GradCheckConfig, Init, NllQuery, NllTarget, ParamId,
    ParamStore, Primitive, Result, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(
    params: &mut ParamStore<f64>,
    name: &str,
    shape: &[usize],
    r: &mut ChaCha8Rng,
) -> ParamId {
    params
        .init(name, shape, Init::Uniform { bound: 1.0 }, r)
        .unwrap()
}

/// Random projection so every output entry gets a distinct upstream gradient.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|_| rand::Rng::random_range(&mut r, -1.0..1.0))
        .collect();
    let w = tape.constant(Tensor::new(shape, w)?)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(params: &mut ParamStore<f64>, f: impl FnMut(&mut Tape<'_, f64>) -> Result<Var>) {
    let report = finite_difference_check(params, &GradCheckConfig::default(), f).unwrap();
    assert!(
        report.passed,
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst()
    );
}

#[test]
fn matmul_with_identity_is_identity() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
    let i = tape.constant(Tensor::identity(2)).unwrap();
    let av = tape.constant(a.clone()).unwrap();
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn softmax_of_equal_values_is_uniform() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let x = tape
        .constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]))
        .unwrap();
    let y = tape.softmax(x, 1).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn lstm_cell_with_zero_weights_and_state_outputs_zero() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let x = tape
        .constant(Tensor::row_vector(vec![0.3, -1.0, 2.0]))
        .unwrap();
    let h = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let c = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let w = tape.constant(Tensor::zeros(&[7, 16])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1, 16])).unwrap();
    let out = tape.lstm_cell(x, h, c, w, b).unwrap();
    assert_eq!(tape.shape(out), &[1, 8]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut params = ParamStore::<f64>::new();
    let p = params
        .insert(
            "p",
            Tensor::matrix(2, 2, vec![0.1, -3.0, 4.0, 9.0]).unwrap(),
        )
        .unwrap();
    let mut tape = Tape::new(&params);
    let v = tape.param(p);
    let loss = tape.sum(v).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(p, &params).data(), &[1.0; 4]);
}

#[test]
fn gradient_of_sum_of_squares_is_twice_the_value() {
    let mut params = ParamStore::<f64>::new();
    let p = params
        .insert("p", Tensor::row_vector(vec![1.0, 2.0, 3.0]))
        .unwrap();
    let mut tape = Tape::new(&params);
    let v = tape.param(p);
    let sq = tape.mul(v, v).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(p, &params).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut params = ParamStore::<f64>::new();
    let p = params
        .insert("used", Tensor::row_vector(vec![1.0]))
        .unwrap();
    let q = params
        .insert("unused", Tensor::row_vector(vec![1.0, 2.0]))
        .unwrap();
    let mut tape = Tape::new(&params);
    let v = tape.param(p);
    let loss = tape.sum(v).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(!grads.reached(q));
    assert_eq!(grads.get(q, &params).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let x = tape.constant(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
    assert_eq!(
        tape.backward(x).unwrap_err(),
        AutodiffError::NonScalarLoss(vec![1, 2])
    );
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    match tape.matmul(a, b).unwrap_err() {
        AutodiffError::ShapeMismatch { op, shapes, .. } => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_output_names_the_primitive() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let a = tape.constant(Tensor::row_vector(vec![-1.0])).unwrap();
    assert_eq!(
        tape.log(a).unwrap_err(),
        AutodiffError::NonFinite { op: "log" }
    );
}

#[test]
fn two_layer_ffnn_matches_finite_differences() {
    let mut r = rng(11);
    let mut params = ParamStore::<f64>::new();
    let w1 = uniform(&mut params, "w1", &[4, 6], &mut r);
    let b1 = uniform(&mut params, "b1", &[1, 6], &mut r);
    let w2 = uniform(&mut params, "w2", &[6, 1], &mut r);
    let b2 = uniform(&mut params, "b2", &[1, 1], &mut r);
    let input = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    check(&mut params, |tape| {
        let x = tape.constant(input.clone())?;
        let (w1, b1, w2, b2) = (
            tape.param(w1),
            tape.param(b1),
            tape.param(w2),
            tape.param(b2),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        tape.sum(o)
    });
}

#[test]
fn every_primitive_passes_gradient_check() {
    type Build = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("add_broadcast", vec![vec![3, 4], vec![1, 4]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        ("concat1", vec![vec![2, 3], vec![2, 1]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("tanh", vec![vec![3, 3]], |t, v| t.tanh(v[0])),
        ("sigmoid", vec![vec![3, 3]], |t, v| t.sigmoid(v[0])),
        ("relu", vec![vec![3, 3]], |t, v| t.relu(v[0])),
        ("softmax1", vec![vec![3, 4]], |t, v| t.softmax(v[0], 1)),
        ("softmax0", vec![vec![3, 4]], |t, v| t.softmax(v[0], 0)),
        ("log_softmax", vec![vec![3, 4]], |t, v| {
            t.log_softmax(v[0], 1)
        }),
        ("log", vec![vec![2, 3]], |t, v| {
            let s = t.sigmoid(v[0])?;
            t.log(s)
        }),
        ("dropout", vec![vec![2, 3]], |t, v| {
            t.dropout(v[0], vec![true, false, true, true, false, true], 0.4)
        }),
        ("gather", vec![vec![4, 3]], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2])
        }),
        ("embedding", vec![vec![5, 2]], |t, v| {
            t.embedding_lookup(v[0], &[4, 4, 1])
        }),
        ("slice_cols", vec![vec![3, 5]], |t, v| {
            t.slice_cols(v[0], 1, 3)
        }),
        ("transpose", vec![vec![2, 5]], |t, v| t.transpose(v[0])),
        (
            "conv1d_max_pool",
            vec![vec![9, 3], vec![6, 4], vec![1, 4]],
            |t, v| t.conv1d_max_pool(v[0], v[1], v[2], 2, &[(0, 1), (1, 5), (6, 3)]),
        ),
        (
            "lstm_cell",
            vec![vec![2, 3], vec![2, 4], vec![2, 4], vec![7, 16], vec![1, 16]],
            |t, v| t.lstm_cell(v[0], v[1], v[2], v[3], v[4]),
        ),
        ("marginal_nll", vec![vec![5, 1]], |t, v| {
            t.marginal_nll(
                v[0],
                vec![
                    NllQuery {
                        candidates: vec![0, 1, 2],
                        targets: vec![NllTarget::Candidate(0), NllTarget::Candidate(2)],
                    },
                    NllQuery {
                        candidates: vec![3, 4],
                        targets: vec![NllTarget::Epsilon],
                    },
                ],
            )
        }),
    ];
    for (k, (name, shapes, build)) in cases.into_iter().enumerate() {
        let mut r = rng(100 + k as u64);
        let mut params = ParamStore::<f64>::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| uniform(&mut params, &format!("{name}{i}"), s, &mut r))
            .collect();
        let report = finite_difference_check(&params, &GradCheckConfig::default(), |tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let y = build(tape, &vars)?;
            project(tape, y, 7)
        })
        .unwrap();
        assert!(
            report.passed,
            "{name}: {} at {:?}",
            report.max_relative_error,
            report.worst()
        );
    }
}

/// 3-layer BiLSTM over 5 tokens, attention pooling, and an FFNN head, wired
/// directly from primitives.
#[test]
fn bilstm_attention_ffnn_stack_matches_finite_differences() {
    let (emb, hidden, tokens) = (3, 3, 5);
    let mut r = rng(5);
    let mut params = ParamStore::<f64>::new();
    let mut layers = Vec::new();
    for layer in 0..3 {
        let input = if layer == 0 { emb } else { 2 * hidden };
        let mut dirs = Vec::new();
        for dir in ["fw", "bw"] {
            let w = uniform(
                &mut params,
                &format!("l{layer}_{dir}_w"),
                &[input + hidden, 4 * hidden],
                &mut r,
            );
            let b = uniform(
                &mut params,
                &format!("l{layer}_{dir}_b"),
                &[1, 4 * hidden],
                &mut r,
            );
            dirs.push((w, b));
        }
        layers.push(dirs);
    }
    let att = uniform(&mut params, "att", &[2 * hidden, 1], &mut r);
    let w1 = uniform(&mut params, "w1", &[2 * hidden, 4], &mut r);
    let b1 = uniform(&mut params, "b1", &[1, 4], &mut r);
    let w2 = uniform(&mut params, "w2", &[4, 1], &mut r);
    let input = Tensor::matrix(
        tokens,
        emb,
        (0..tokens * emb).map(|i| (i as f64 * 0.71).cos()).collect(),
    )
    .unwrap();

    check(&mut params, |tape| {
        let mut x = tape.constant(input.clone())?;
        for dirs in &layers {
            let mut outputs = Vec::new();
            for (d, &(w, b)) in dirs.iter().enumerate() {
                let (w, b) = (tape.param(w), tape.param(b));
                let mut h = tape.constant(Tensor::zeros(&[1, hidden]))?;
                let mut c = tape.constant(Tensor::zeros(&[1, hidden]))?;
                let mut rows = vec![h; tokens];
                let order: Vec<usize> = if d == 0 {
                    (0..tokens).collect()
                } else {
                    (0..tokens).rev().collect()
                };
                for t in order {
                    let xt = tape.gather_rows(x, &[t])?;
                    let hc = tape.lstm_cell(xt, h, c, w, b)?;
                    h = tape.slice_cols(hc, 0, hidden)?;
                    c = tape.slice_cols(hc, hidden, hidden)?;
                    rows[t] = h;
                }
                outputs.push(tape.concat(&rows, 0)?);
            }
            x = tape.concat(&outputs, 1)?;
        }
        let att = tape.param(att);
        let scores = tape.matmul(x, att)?;
        let weights = tape.softmax(scores, 0)?;
        let wt = tape.transpose(weights)?;
        let pooled = tape.matmul(wt, x)?;
        let (w1, b1, w2) = (tape.param(w1), tape.param(b1), tape.param(w2));
        let hdn = tape.matmul(pooled, w1)?;
        let hdn = tape.add(hdn, b1)?;
        let hdn = tape.tanh(hdn)?;
        let out = tape.matmul(hdn, w2)?;
        tape.sum(out)
    });
}

#[test]
fn conv_output_length_is_independent_of_token_length() {
    let mut r = rng(1);
    let mut params = ParamStore::<f64>::new();
    let input = uniform(&mut params, "in", &[20, 2], &mut r);
    let filt = uniform(&mut params, "f", &[10, 3], &mut r);
    let bias = uniform(&mut params, "b", &[1, 3], &mut r);
    let mut tape = Tape::new(&params);
    let (i, f, b) = (tape.param(input), tape.param(filt), tape.param(bias));
    for segs in [vec![(0, 1)], vec![(0, 20)], vec![(3, 4), (7, 13)]] {
        let out = tape.conv1d_max_pool(i, f, b, 5, &segs).unwrap();
        assert_eq!(tape.shape(out), &[segs.len(), 3]);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut r = rng(9);
        let mut params = ParamStore::<f32>::new();
        let w = params
            .init("w", &[6, 5], Init::TruncatedNormal { std: 0.5 }, &mut r)
            .unwrap();
        let mut tape = Tape::new(&params);
        let x = tape
            .constant(Tensor::matrix(2, 6, (0..12).map(|i| i as f32 * 0.1).collect()).unwrap())
            .unwrap();
        let wv = tape.param(w);
        let y = tape.matmul(x, wv).unwrap();
        let y = tape.tanh(y).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(loss).clone(), g.get(w, &params))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a
        .1
        .data()
        .iter()
        .zip(b.1.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn adam_decreases_a_quadratic() {
    let mut params = ParamStore::<f64>::new();
    let p = params
        .insert("p", Tensor::row_vector(vec![3.0, -2.0]))
        .unwrap();
    let mut adam = bridging_autodiff::Adam::new(&params, 0.1);
    for _ in 0..300 {
        let grads = {
            let mut tape = Tape::new(&params);
            let v = tape.param(p);
            let sq = tape.mul(v, v).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss).unwrap()
        };
        params.accumulate(&grads);
        adam.step(&mut params);
    }
    assert!(params.value(p).data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn primitive_names_are_stable() {
    assert_eq!(Primitive::Conv1dMaxPool.name(), "conv1d_max_pool");
    assert_eq!(Primitive::LstmCell.name(), "lstm_cell");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 1..8), 1..5)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let params = ParamStore::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows.len() {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn log_softmax_stays_finite_for_large_inputs(v in prop::collection::vec(-1e30f64..1e30, 1..10)) {
        let params = ParamStore::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::row_vector(v)).unwrap();
        let y = tape.log_softmax(x, 1).unwrap();
        prop_assert!(tape.value(y).all_finite());
    }
}

#[test]
fn kink_margin_reports_nearest_relu_input_and_max_pool_gap() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    assert_eq!(tape.kink_margin(), None);
    let x = tape
        .constant(Tensor::matrix(1, 3, vec![0.5, -0.02, 2.0]).unwrap())
        .unwrap();
    tape.relu(x).unwrap();
    assert_eq!(tape.kink_margin(), Some(0.02));

    // Windows over one 3-char segment score 1.0 and 0.9 for the single filter.
    let chars = tape
        .constant(Tensor::matrix(3, 1, vec![0.4, 0.6, 0.3]).unwrap())
        .unwrap();
    let filters = tape
        .constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap())
        .unwrap();
    let bias = tape
        .constant(Tensor::matrix(1, 1, vec![0.0]).unwrap())
        .unwrap();
    tape.conv1d_max_pool(chars, filters, bias, 2, &[(0, 3)])
        .unwrap();
    let m = tape.kink_margin().unwrap();
    assert!((m - 0.02).abs() < 1e-12);
    let y = tape
        .constant(Tensor::matrix(1, 1, vec![1e-3]).unwrap())
        .unwrap();
    tape.relu(y).unwrap();
    assert_eq!(tape.kink_margin(), Some(1e-3));
}

#[test]
fn kink_margin_sees_close_max_pool_windows() {
    let params = ParamStore::<f64>::new();
    let mut tape = Tape::new(&params);
    let chars = tape
        .constant(Tensor::matrix(3, 1, vec![0.4, 0.6, 0.395]).unwrap())
        .unwrap();
    let filters = tape
        .constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap())
        .unwrap();
    let bias = tape
        .constant(Tensor::matrix(1, 1, vec![0.0]).unwrap())
        .unwrap();
    tape.conv1d_max_pool(chars, filters, bias, 2, &[(0, 3)])
        .unwrap();
    assert!((tape.kink_margin().unwrap() - 0.005).abs() < 1e-12);
}
