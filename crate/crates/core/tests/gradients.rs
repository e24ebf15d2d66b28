mod oracles;

use proptest::prelude::*;
use sarvlm::rng::RngState;
use sarvlm::tape::Tape;
use sarvlm::tensor::Tensor;

#[test]
fn every_op_matches_finite_differences() {
    let report = oracles::check_gradients();
    assert!(report.is_ok(), "{report:?}");
}

#[test]
fn suite_covers_every_op_and_enough_shapes() {
    let worst = oracles::gradient_suite();
    let names: Vec<&str> = worst.iter().map(|w| w.0.as_str()).collect();
    for op in [
        "matmul", "add", "mul", "transpose", "concat_rows", "slice_cols", "mean_axis0", "exp", "log", "softmax",
        "layer_norm", "gelu", "embedding_lookup", "cross_entropy", "l2_normalize", "dropout", "clip_loss",
    ] {
        assert!(names.contains(&op), "missing {op}");
    }
    assert!(oracles::GRAD_SEEDS >= 20);
}

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], 1.0, &mut RngState::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..9, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(tensor(r, c, seed).map(|v| v * 20.0));
        let y = x.softmax().unwrap();
        let v = y.value();
        for i in 0..r {
            let row = v.row(i);
            prop_assert!(row.iter().all(|&p| p > 0.0 || p == 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(r in 1usize..6, c in 1usize..9, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let y = tape.constant(tensor(r, c, seed)).l2_normalize().unwrap();
        let v = y.value();
        for i in 0..r {
            let n: f64 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(r in 1usize..6, c in 2usize..9, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let y = tape.constant(tensor(r, c, seed)).layer_norm().unwrap();
        let v = y.value();
        for i in 0..r {
            let mean = v.row(i).iter().sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let a = tensor(m, k, seed);
        let b = tensor(k, n, seed ^ 1);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.get2(i, p) * b.get2(p, j)).sum();
                prop_assert!((c.get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_broadcast_equals_explicit_expansion(r in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
        let tape = Tape::<f64>::new();
        let x = tensor(r, c, seed);
        let row = Tensor::randn(&[c], 1.0, &mut RngState::new(seed ^ 7));
        let expanded: Vec<f64> = (0..r).flat_map(|_| row.data().to_vec()).collect();
        let a = tape.constant(x.clone()).add(tape.constant(row)).unwrap();
        let b = tape.constant(x).add(tape.constant(Tensor::from_vec(&[r, c], expanded))).unwrap();
        let (av, bv) = (a.value(), b.value());
        prop_assert_eq!(av.data(), bv.data());
    }
}
