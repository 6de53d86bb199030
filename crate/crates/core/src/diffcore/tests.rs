use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn tree(leaves: Vec<(&str, Tensor)>) -> ParamTree {
    leaves.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// `Σ op(..) ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, r: &Tensor) -> Result<Var, TensorError> {
    let rv = tape.constant_f64(&r.clone().reshape(tape.shape(y))?);
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

#[test]
fn evaluate_identity_matmul() {
    let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| t.matmul(p.get("w")?, x[0]);
    let params = tree(vec![("w", Tensor::identity(3))]);
    let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    let y = evaluate(&f, &params, &[x.clone()]).unwrap();
    assert_eq!(y, x);
}

#[test]
fn evaluate_softmax_of_zeros_is_uniform() {
    let f = |t: &mut Tape, _: &ParamVars, x: &[Var]| t.softmax(x[0]);
    let y = evaluate(&f, &ParamTree::new(), &[Tensor::zeros(&[1, 4])]).unwrap();
    for &v in y.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn evaluate_rejects_mismatched_matmul() {
    let f = |t: &mut Tape, p: &ParamVars, x: &[Var]| t.matmul(p.get("w")?, x[0]);
    let params = tree(vec![("w", Tensor::zeros(&[2, 3]))]);
    let err = evaluate(&f, &params, &[Tensor::zeros(&[2, 2])]).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
}

#[test]
fn gradient_of_square() {
    let f = |t: &mut Tape, p: &ParamVars, _: &[Var]| {
        let w = p.get("w")?;
        let ww = t.mul(w, w)?;
        Ok(t.sum(ww))
    };
    let g = gradient(&f, &tree(vec![("w", Tensor::vector(vec![3.0]))]), &[]).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[6.0]);
}

#[test]
fn gradient_of_constant_is_zero_tree() {
    let f = |t: &mut Tape, _: &ParamVars, _: &[Var]| Ok(t.constant(Tensor::scalar(2.5)));
    let params = tree(vec![("a", Tensor::full(&[2, 2], 1.0)), ("b", Tensor::vector(vec![1.0, 2.0]))]);
    let g = gradient(&f, &params, &[]).unwrap();
    assert_eq!(g.names().collect::<Vec<_>>(), vec!["a", "b"]);
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_rejects_non_scalar_output() {
    let f = |_: &mut Tape, p: &ParamVars, _: &[Var]| p.get("w");
    let err = gradient(&f, &tree(vec![("w", Tensor::zeros(&[2]))]), &[]).unwrap_err();
    assert!(matches!(err, TensorError::NonScalar { .. }));
}

fn mlp(t: &mut Tape, p: &ParamVars, x: &[Var]) -> Result<Var, TensorError> {
    let h = t.matmul(x[0], p.get("w1")?)?;
    let h = t.add_row(h, p.get("b1")?)?;
    let h = t.relu(h);
    let z = t.matmul(h, p.get("w2")?)?;
    let z = t.add_row(z, p.get("b2")?)?;
    t.softmax_xent(z, &x_target())
}

fn x_target() -> Tensor {
    Tensor::matrix(4, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0]).unwrap()
}

#[test]
fn finite_difference_on_random_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = tree(vec![
        ("w1", randn(&mut rng, &[5, 8])),
        ("b1", randn(&mut rng, &[8])),
        ("w2", randn(&mut rng, &[8, 3])),
        ("b2", randn(&mut rng, &[3])),
    ]);
    let x = randn(&mut rng, &[4, 5]);
    let report = finite_diff_report(&mlp, &params, &[x], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked + report.excluded, params.numel());
}

#[test]
fn finite_difference_on_linear_function_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = randn(&mut rng, &[3, 2]);
    let f = move |t: &mut Tape, p: &ParamVars, _: &[Var]| {
        let w = p.get("w")?;
        project(t, w, &r)
    };
    let params = tree(vec![("w", randn(&mut rng, &[3, 2]))]);
    assert!(finite_diff_check(&f, &params, &[], 1e-5).unwrap() < 1e-9);
}

#[test]
fn finite_difference_skips_relu_kink() {
    let f = |t: &mut Tape, p: &ParamVars, _: &[Var]| {
        let r = t.relu(p.get("w")?);
        Ok(t.sum(r))
    };
    let params = tree(vec![("w", Tensor::vector(vec![0.0, 1.0, -1.0]))]);
    let report = finite_diff_report(&f, &params, &[], 1e-5).unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error < 1e-9);
}

#[test]
fn finite_difference_rejects_bad_step() {
    let f = |t: &mut Tape, p: &ParamVars, _: &[Var]| Ok(t.sum(p.get("w")?));
    let params = tree(vec![("w", Tensor::vector(vec![1.0]))]);
    assert!(matches!(finite_diff_check(&f, &params, &[], 0.0), Err(TensorError::InvalidStep(_))));
}

/// Random-shape check of one primitive against central differences.
fn check_op(name: &str, seed: u64, build: impl Fn(&mut ChaCha8Rng) -> (ParamTree, Vec<Tensor>, Box<dyn Fn(&mut Tape, &ParamVars, &[Var]) -> Result<Var, TensorError>>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..100 {
        let (params, inputs, f) = build(&mut rng);
        let report = finite_diff_report(&f, &params, &inputs, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name} trial {trial}: {report:?}");
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

#[test]
fn primitive_add() {
    check_op("add", 11, |rng| {
        let s = [dim(rng), dim(rng)];
        let r = randn(rng, &s);
        let p = tree(vec![("a", randn(rng, &s)), ("b", randn(rng, &s))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.add(p.get("a")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_sub_and_scale() {
    check_op("sub", 12, |rng| {
        let s = [dim(rng), dim(rng)];
        let r = randn(rng, &s);
        let c: f64 = rng.sample(StandardNormal);
        let p = tree(vec![("a", randn(rng, &s)), ("b", randn(rng, &s))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.sub(p.get("a")?, p.get("b")?)?;
            let y = t.scale(y, c);
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_mul() {
    check_op("mul", 13, |rng| {
        let s = [dim(rng), dim(rng)];
        let r = randn(rng, &s);
        let p = tree(vec![("a", randn(rng, &s)), ("b", randn(rng, &s))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.mul(p.get("a")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_matmul() {
    check_op("matmul", 14, |rng| {
        let (m, k, n) = (dim(rng), dim(rng), dim(rng));
        let r = randn(rng, &[m, n]);
        let p = tree(vec![("a", randn(rng, &[m, k])), ("b", randn(rng, &[k, n]))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.matmul(p.get("a")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_add_row() {
    check_op("add_row", 15, |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let r = randn(rng, &[m, n]);
        let p = tree(vec![("a", randn(rng, &[m, n])), ("b", randn(rng, &[n]))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.add_row(p.get("a")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_relu() {
    check_op("relu", 16, |rng| {
        let s = [dim(rng), dim(rng)];
        let r = randn(rng, &s);
        let p = tree(vec![("a", randn(rng, &s))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.relu(p.get("a")?);
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_sigmoid() {
    check_op("sigmoid", 17, |rng| {
        let s = [dim(rng), dim(rng)];
        let r = randn(rng, &s);
        let a = randn(rng, &s).map(|v| 3.0 * v);
        (tree(vec![("a", a)]), vec![], Box::new(move |t, p, _| {
            let y = t.sigmoid(p.get("a")?);
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_softmax() {
    check_op("softmax", 18, |rng| {
        let s = [dim(rng), dim(rng) + 1];
        let r = randn(rng, &s);
        (tree(vec![("a", randn(rng, &s))]), vec![], Box::new(move |t, p, _| {
            let y = t.softmax(p.get("a")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_softmax_xent() {
    check_op("softmax_xent", 19, |rng| {
        let (m, n) = (dim(rng), dim(rng) + 1);
        let target = Tensor::new(vec![m, n], (0..m * n).map(|_| rng.random::<f64>()).collect()).unwrap();
        (tree(vec![("a", randn(rng, &[m, n]))]), vec![], Box::new(move |t, p, _| t.softmax_xent(p.get("a")?, &target)))
    });
}

#[test]
fn primitive_gap() {
    check_op("gap", 20, |rng| {
        let s = [dim(rng), dim(rng), dim(rng), dim(rng)];
        let r = randn(rng, &[s[0], s[1]]);
        (tree(vec![("x", randn(rng, &s))]), vec![], Box::new(move |t, p, _| {
            let y = t.gap(p.get("x")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_concat_cols() {
    check_op("concat_cols", 21, |rng| {
        let (m, n1, n2) = (dim(rng), dim(rng), dim(rng));
        let r = randn(rng, &[m, n1 + n2]);
        let p = tree(vec![("a", randn(rng, &[m, n1])), ("b", randn(rng, &[m, n2]))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.concat_cols(p.get("a")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_gather_rows_and_row_dot() {
    check_op("gather_rows", 22, |rng| {
        let (m, n) = (dim(rng), dim(rng));
        let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..m)).collect();
        let r = randn(rng, &[6]);
        let p = tree(vec![("a", randn(rng, &[m, n])), ("b", randn(rng, &[6, n]))]);
        (p, vec![], Box::new(move |t, p, _| {
            let g = t.gather_rows(p.get("a")?, &idx)?;
            let y = t.row_dot(g, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_conv2d() {
    check_op("conv2d", 23, |rng| {
        let (n, c, o, h, w) = (dim(rng), dim(rng), dim(rng), dim(rng) + 1, dim(rng) + 1);
        let k = if rng.random::<bool>() { 3 } else { 1 };
        let r = randn(rng, &[n, o, h, w]);
        let p = tree(vec![("x", randn(rng, &[n, c, h, w])), ("w", randn(rng, &[o, c, k, k])), ("b", randn(rng, &[o]))]);
        (p, vec![], Box::new(move |t, p, _| {
            let y = t.conv2d(p.get("x")?, p.get("w")?, p.get("b")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_max_pool2() {
    check_op("max_pool2", 24, |rng| {
        let s = [dim(rng), dim(rng), 2 * dim(rng), 2 * dim(rng)];
        let r = randn(rng, &[s[0], s[1], s[2] / 2, s[3] / 2]);
        (tree(vec![("x", randn(rng, &s))]), vec![], Box::new(move |t, p, _| {
            let y = t.max_pool2(p.get("x")?)?;
            project(t, y, &r)
        }))
    });
}

#[test]
fn primitive_reshape() {
    check_op("reshape", 25, |rng| {
        let (a, b) = (dim(rng), dim(rng));
        let r = randn(rng, &[b, a]);
        (tree(vec![("x", randn(rng, &[a, b]))]), vec![], Box::new(move |t, p, _| {
            let y = t.reshape(p.get("x")?, &[b, a])?;
            let y = t.sigmoid(y);
            project(t, y, &r)
        }))
    });
}

#[test]
fn gradient_is_linear_in_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = tree(vec![
        ("w1", randn(&mut rng, &[5, 8])),
        ("b1", randn(&mut rng, &[8])),
        ("w2", randn(&mut rng, &[8, 3])),
        ("b2", randn(&mut rng, &[3])),
    ]);
    let x = randn(&mut rng, &[4, 5]);
    let r = randn(&mut rng, &[5, 8]);
    let g_fn = move |t: &mut Tape, p: &ParamVars, _: &[Var]| {
        let s = t.sigmoid(p.get("w1")?);
        project(t, s, &r)
    };
    let sum_fn = |t: &mut Tape, p: &ParamVars, x: &[Var]| {
        let a = mlp(t, p, x)?;
        let b = g_fn(t, p, x)?;
        t.add(a, b)
    };
    let inputs = [x];
    let lhs = gradient(&sum_fn, &params, &inputs).unwrap();
    let rhs = gradient(&mlp, &params, &inputs).unwrap().add(&gradient(&g_fn, &params, &inputs).unwrap()).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
}

#[test]
fn evaluation_is_referentially_transparent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = tree(vec![
        ("w1", randn(&mut rng, &[5, 8])),
        ("b1", randn(&mut rng, &[8])),
        ("w2", randn(&mut rng, &[8, 3])),
        ("b2", randn(&mut rng, &[3])),
    ]);
    let before = params.clone();
    let x = [randn(&mut rng, &[4, 5])];
    let a = evaluate(&mlp, &params, &x).unwrap();
    let g1 = gradient(&mlp, &params, &x).unwrap();
    let b = evaluate(&mlp, &params, &x).unwrap();
    let g2 = gradient(&mlp, &params, &x).unwrap();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert_eq!(g1, g2);
    assert_eq!(params, before);
}

fn smooth<T: Scalar>(t: &mut Tape<T>, p: &ParamVars, x: &[Var]) -> Result<Var, TensorError> {
    let h = t.matmul(x[0], p.get("w1")?)?;
    let h = t.sigmoid(h);
    let z = t.matmul(h, p.get("w2")?)?;
    t.softmax_xent(z, &x_target())
}

#[test]
fn hessian_vector_product_matches_difference_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = tree(vec![("w1", randn(&mut rng, &[5, 6])), ("w2", randn(&mut rng, &[6, 3]))]);
    let v = tree(vec![("w1", randn(&mut rng, &[5, 6])), ("w2", randn(&mut rng, &[6, 3]))]);
    let x = [randn(&mut rng, &[4, 5])];
    let (g, hv) = hessian_vector_product(&smooth::<Dual>, &params, &x, &v).unwrap();
    let g_ref = gradient(&smooth::<f64>, &params, &x).unwrap();
    assert!(g.max_abs_diff(&g_ref).unwrap() < 1e-12);

    let h = 1e-5;
    let mut plus = params.clone();
    plus.axpy(h, &v).unwrap();
    let mut minus = params.clone();
    minus.axpy(-h, &v).unwrap();
    let fd = gradient(&smooth::<f64>, &plus, &x)
        .unwrap()
        .sub(&gradient(&smooth::<f64>, &minus, &x).unwrap())
        .unwrap()
        .scaled(1.0 / (2.0 * h));
    let scale = hv.norm().max(1.0);
    assert!(hv.max_abs_diff(&fd).unwrap() / scale < 1e-6);
}
