use std::rc::Rc;

use crowdwm_nn::gradcheck::{check_inputs, check_params};
use crowdwm_nn::{
    AttnMask, Graph, LayerNorm, Linear, MaskMode, Mat, Mlp, MultiHeadAttention, NnError,
    ParamStore, Result, Var,
};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.2..2.0))
}

/// Reduces an arbitrary-shaped node to a scalar with fixed random weights so
/// every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.input(random(&mut rng, r, c));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_check(
    name: &str,
    seed: u64,
    inputs: &[Mat],
    build: impl Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
) {
    let store = ParamStore::new();
    let report = check_inputs(&store, inputs, STEP, |g, v| {
        let y = build(g, v)?;
        weighted_sum(g, y, seed)
    })
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name} seed {seed}: rel error {} at {}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_and_matrix_operators_pass_gradcheck() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        let m = random(&mut rng, 4, 5);
        let n = random(&mut rng, 2, 4);

        assert_check("add", seed, &[a.clone(), b.clone()], |g, v| {
            g.add(v[0], v[1])
        });
        assert_check("sub", seed, &[a.clone(), b.clone()], |g, v| {
            g.sub(v[0], v[1])
        });
        assert_check("mul", seed, &[a.clone(), b.clone()], |g, v| {
            g.mul(v[0], v[1])
        });
        assert_check("add_row", seed, &[a.clone(), row.clone()], |g, v| {
            g.add_row(v[0], v[1])
        });
        assert_check("mul_row", seed, &[a.clone(), row.clone()], |g, v| {
            g.mul_row(v[0], v[1])
        });
        assert_check("scale", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.scale(v[0], -0.7))
        });
        assert_check("add_scalar", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.add_scalar(v[0], 2.5))
        });
        assert_check("matmul", seed, &[a.clone(), m.clone()], |g, v| {
            g.matmul(v[0], v[1])
        });
        assert_check("matmul_t", seed, &[a.clone(), n.clone()], |g, v| {
            g.matmul_t(v[0], v[1])
        });
        assert_check(
            "exp",
            seed,
            std::slice::from_ref(&a),
            |g, v| Ok(g.exp(v[0])),
        );
        assert_check("log", seed, &[positive(&mut rng, 3, 4)], |g, v| {
            Ok(g.log(v[0]))
        });
        assert_check("square", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.square(v[0]))
        });
        assert_check("gelu", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.gelu(v[0]))
        });
        assert_check(
            "sum",
            seed,
            std::slice::from_ref(&a),
            |g, v| Ok(g.sum(v[0])),
        );
        assert_check("mean", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.mean(v[0]))
        });
        assert_check("layer_norm_rows", seed, std::slice::from_ref(&a), |g, v| {
            Ok(g.layer_norm_rows(v[0], 1e-5))
        });
        assert_check("slice_cols", seed, std::slice::from_ref(&a), |g, v| {
            g.slice_cols(v[0], 1, 2)
        });
        assert_check("concat_cols", seed, &[a.clone(), b.clone()], |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]])
        });
        assert_check("concat_rows", seed, &[a.clone(), n.clone()], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        });
        assert_check("select_rows", seed, std::slice::from_ref(&a), |g, v| {
            g.select_rows(v[0], &[2, 0, 2])
        });
    }
}

#[test]
fn softmax_variants_pass_gradcheck() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random(&mut rng, 4, 5);
        let keep = Array2::from_shape_fn((4, 5), |(r, c)| c == r || rng.random_bool(0.6));
        let keep = Rc::new(keep);
        assert_check("softmax", seed, std::slice::from_ref(&x), |g, v| {
            g.softmax_rows(v[0], None, MaskMode::Renormalize)
        });
        let k = keep.clone();
        assert_check(
            "softmax masked",
            seed,
            std::slice::from_ref(&x),
            move |g, v| g.softmax_rows(v[0], Some(k.clone()), MaskMode::Renormalize),
        );
        let k = keep.clone();
        assert_check(
            "softmax hadamard",
            seed,
            std::slice::from_ref(&x),
            move |g, v| g.softmax_rows(v[0], Some(k.clone()), MaskMode::Hadamard),
        );
    }
}

fn layer_report(
    seed: u64,
    build_layer: impl Fn(
        &mut ParamStore,
        &mut ChaCha8Rng,
    ) -> Box<dyn Fn(&mut Graph<'_>, Var, Var) -> Result<Var>>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let mut store = ParamStore::new();
    let forward = build_layer(&mut store, &mut rng);
    let src = random(&mut rng, 5, 12);
    let tgt = random(&mut rng, 3, 12);

    let by_param = check_params(&store, None, STEP, |g| {
        let s = g.input(src.clone());
        let t = g.input(tgt.clone());
        let y = forward(g, s, t)?;
        weighted_sum(g, y, seed)
    })
    .unwrap();
    assert!(
        by_param.max_rel_error < TOL,
        "seed {seed}: {}",
        by_param.worst
    );

    let by_input = check_inputs(&store, &[src.clone(), tgt.clone()], STEP, |g, v| {
        let y = forward(g, v[0], v[1])?;
        weighted_sum(g, y, seed)
    })
    .unwrap();
    assert!(
        by_input.max_rel_error < TOL,
        "seed {seed}: {}",
        by_input.worst
    );
}

#[test]
fn layers_pass_gradcheck() {
    for seed in 0..10u64 {
        layer_report(seed, |store, rng| {
            let lin = Linear::new(store, "lin", 12, 7, rng).unwrap();
            Box::new(move |g, _s, t| lin.forward(g, t))
        });
        layer_report(seed, |store, rng| {
            let mlp = Mlp::new(store, "mlp", &[12, 16, 6], rng).unwrap();
            Box::new(move |g, s, _t| mlp.forward(g, s))
        });
        layer_report(seed, |store, rng| {
            let ln = LayerNorm::new(store, "ln", 12).unwrap();
            // move gamma/beta away from their trivial init
            for id in [ln.gamma, ln.beta] {
                store
                    .get_mut(id)
                    .mapv_inplace(|x| x + rng.random_range(-0.5..0.5));
            }
            Box::new(move |g, s, _t| ln.forward(g, s))
        });
        layer_report(seed, |store, rng| {
            let mha = MultiHeadAttention::new(store, "mha", 12, 5, rng).unwrap();
            let keep = Array2::from_shape_fn((3, 5), |(t, s)| s != 1 || t == 0);
            let mask = AttnMask::new(keep);
            Box::new(move |g, s, t| mha.forward(g, s, t, Some(&mask), MaskMode::Renormalize))
        });
        layer_report(seed, |store, rng| {
            let mha = MultiHeadAttention::new(store, "mha", 12, 3, rng).unwrap();
            Box::new(move |g, s, _t| mha.forward(g, s, s, None, MaskMode::Renormalize))
        });
    }
}

#[test]
fn linear_examples() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut store, "id", 3, 3, &mut rng).unwrap();
    *store.get_mut(lin.weight) = Array2::eye(3);
    *store.get_mut(lin.bias.unwrap()) = Array2::zeros((1, 3));
    let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let y = lin.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(y), &x);

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "affine", 1, 1, &mut rng).unwrap();
    *store.get_mut(lin.weight) = array![[2.0]];
    *store.get_mut(lin.bias.unwrap()) = array![[1.0]];
    let mut g = Graph::new(&store);
    let xv = g.input(array![[3.0]]);
    let y = lin.forward(&mut g, xv).unwrap();
    assert_eq!(g.value(y), &array![[7.0]]);

    // d sum(output) / d bias = n * ones
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 4, 2, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.input(random(&mut rng, 5, 4));
    let y = lin.forward(&mut g, xv).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(
        grads.param(lin.bias.unwrap()).unwrap(),
        &Array2::from_elem((1, 2), 5.0)
    );
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lin = Linear::new(&mut store, "l", 4, 2, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let x = g.input(Array2::zeros((3, 5)));
    let err = lin.forward(&mut g, x).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(3, 5)") && msg.contains("(2, 4)"), "{msg}");
}

#[test]
fn backward_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let w = g.input(array![[1.0, 2.0, -3.0]]);
    let x = g.input(array![[0.5, -4.0, 7.0]]);
    let wx = g.mul(w, x).unwrap();
    let loss = g.sum(wx);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), g.value(x));

    // detached input gets no gradient through the detached path
    let d = g.detach(x);
    let wd = g.mul(w, d).unwrap();
    let loss2 = g.sum(wd);
    let grads = g.backward(loss2).unwrap();
    assert!(grads.wrt(x).is_none());
    assert!(grads.wrt(d).is_some());

    // the graph can be differentiated again with identical results
    let again = g.backward(loss2).unwrap();
    assert_eq!(again.wrt(w), grads.wrt(w));

    let err = g.backward(wx).unwrap_err();
    assert!(matches!(err, NnError::NonScalarRoot((1, 3))));
}
