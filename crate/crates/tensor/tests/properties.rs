use peft_forge_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7)) {
        let mut g = Graph::<f32>::new();
        let v = g.constant(x);
        let y = g.softmax(v);
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes(x in matrix(3, 16)) {
        let mut g = Graph::<f32>::new();
        let v = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones([16]));
        let beta = g.constant(Tensor::zeros([16]));
        let y = g.layer_norm(v, gamma, beta, 1e-6).unwrap();
        for (row, src) in g.value(y).data().chunks(16).zip(x.data().chunks(16)) {
            let src_var = {
                let m = src.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
                src.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 16.0
            };
            prop_assume!(src_var > 1e-2);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(a in matrix(5, 6), b in matrix(6, 3)) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = g.matmul(va, vb).unwrap();
            let s = g.softmax(c);
            let h = g.gelu(s);
            g.value(h).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gradients_are_finite_after_backward(a in matrix(3, 4), w in matrix(4, 2)) {
        let mut g = Graph::<f32>::new();
        let va = g.param(a);
        let vw = g.param(w);
        let gamma = g.param(Tensor::ones([4]));
        let beta = g.param(Tensor::zeros([4]));
        let n = g.layer_norm(va, gamma, beta, 1e-6).unwrap();
        let z = g.matmul(n, vw).unwrap();
        let loss = g.cross_entropy(z, &[0, 1, 1]).unwrap();
        let grads = g.backward(loss).unwrap();
        prop_assert_eq!(grads.allocated(), 4);
        prop_assert!(grads.all_finite());
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones([2]));
    assert!(g.backward(x).is_err());
}
