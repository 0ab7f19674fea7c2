use neural_bayes::nn::{Activation, Mode, Network, NetworkSpec};
use neural_bayes::oracles::finite_diff_grad;
use neural_bayes::tape::{ParamId, Tape, Var};
use neural_bayes::tensor::Tensor;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (2..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(lo..hi, r * c).prop_map(move |v| Tensor::new([r, c], v).unwrap())
    })
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() / x.abs().max(1.0)).fold(0.0, f64::max)
}

/// Compares the tape gradient of `sum(f(x) * w)` with central differences.
fn check_unary(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
    let eval = |t: &mut Tape<f64>, xv: Var| {
        let y = f(t, xv);
        let shape = t.shape(y).to_vec();
        let n = shape.iter().product::<usize>();
        let w = t.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect()).unwrap());
        let yw = t.mul(y, w).unwrap();
        t.sum_all(yw)
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone(), ParamId(0));
    let loss = eval(&mut tape, xv);
    let analytic = tape.backward(loss).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let xv = t.constant(p[0].clone());
            let l = eval(&mut t, xv);
            t.value(l).item()
        },
        std::slice::from_ref(x),
        1e-5,
    )
    .unwrap();
    rel_diff(analytic.get(ParamId(0)).unwrap(), numeric.get(ParamId(0)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(x in matrix(6, 8, -20.0, 20.0), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let sa = tape.softmax_rows(a).unwrap();
        let b = tape.constant(x.map(|v| v + shift));
        let sb = tape.softmax_rows(b).unwrap();
        let (pa, pb) = (tape.value(sa).clone(), tape.value(sb).clone());
        for i in 0..pa.rows() {
            prop_assert!((pa.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(pa.max_abs_diff(&pb) <= 1e-12);
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_zero_backward(x in matrix(5, 5, -3.0, 3.0)) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone(), ParamId(0));
        let s = tape.stop_gradient(xv);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(tape.value(s)), bits(&x));
        let sq = tape.square(s);
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        prop_assert!(g.get(ParamId(0)).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn elementwise_primitives_match_finite_differences(x in matrix(4, 4, 0.2, 2.0)) {
        prop_assert!(check_unary(&x, |t, v| t.log(v).unwrap()) <= 1e-4);
        prop_assert!(check_unary(&x, |t, v| t.exp(v)) <= 1e-4);
        prop_assert!(check_unary(&x, |t, v| t.tanh(v)) <= 1e-4);
        prop_assert!(check_unary(&x, |t, v| t.square(v)) <= 1e-4);
        prop_assert!(check_unary(&x, |t, v| t.softmax_rows(v).unwrap()) <= 1e-4);
        let quotient = |t: &mut Tape<f64>, v: Var| {
            let m = t.mul(v, v).unwrap();
            t.div(m, v).unwrap()
        };
        prop_assert!(check_unary(&x, quotient) <= 1e-4);
        prop_assert!(check_unary(&x, |t, v| t.mean_rows(v).unwrap()) <= 1e-4);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(x in matrix(4, 3, -2.0, 2.0), seed in 0u64..1000) {
        let w = neural_bayes::nn::orthogonal_init::<f64>(x.row_len(), 3, seed);
        let product = |t: &mut Tape<f64>, v: Var| {
            let wv = t.constant(w.clone());
            t.matmul(v, wv).unwrap()
        };
        prop_assert!(check_unary(&x, product) <= 1e-4);
    }

    #[test]
    fn evaluation_is_deterministic(x in matrix(6, 4, -2.0, 2.0), seed in 0u64..1000) {
        let net = Network::<f64>::new(NetworkSpec::mlp(x.row_len(), &[5, 3], Some(2), true, Activation::Relu, seed)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let f = net.forward(&mut tape, xv, Mode::Train).unwrap();
            let loss = tape.sum_all(f.output);
            let g = tape.backward(loss).unwrap();
            (tape.value(f.output).clone(), g.iter().map(|(id, t)| (id, t.clone())).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn state_list_matches_declared_taps(rows in 2usize..8, hidden in prop::collection::vec(1usize..6, 0..4), seed in 0u64..100) {
        let net = Network::<f64>::new(NetworkSpec::mlp(3, &hidden, Some(2), false, Activation::Tanh, seed)).unwrap();
        let x = Tensor::new([rows, 3], (0..rows * 3).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (_, states) = net.forward_with_states(&x, Mode::Eval).unwrap();
        prop_assert_eq!(states.len(), hidden.len());
    }

    #[test]
    fn orthogonal_init_has_unit_singular_values(rows in 1usize..12, cols in 1usize..12, seed in 0u64..1000) {
        let w = neural_bayes::nn::orthogonal_init::<f64>(rows, cols, seed);
        let g = if rows <= cols { w.matmul(&w.transpose().unwrap()) } else { w.transpose().unwrap().matmul(&w) }.unwrap();
        let n = rows.min(cols);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((g.at(i, j) - want).abs() <= 1e-6);
            }
        }
    }
}
