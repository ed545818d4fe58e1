//! Finite-difference checks for every differentiable op.

use peft_forge_tensor::gradcheck::{central_difference, mismatches, spread_indices};
use peft_forge_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const H: f64 = 1e-3;
const REL: f64 = 1e-3;
const ABS: f64 = 1e-4;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
}

/// Loss `Σ r ⊙ op(inputs)` with a fixed random readout `r`.
fn loss_of(build: &Build, inputs: &[Tensor<f64>], readout: &Tensor<f64>, wrt: Option<usize>) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), wrt.is_none_or(|w| w == i)))
        .collect();
    let out = build(&mut g, &vars);
    let r = g.constant(readout.clone());
    let weighted = g.mul(out, r).unwrap();
    let loss = g.sum(weighted);
    (g, vars, loss)
}

fn check_op(name: &str, build: &Build, shapes: &[&[usize]], seed: u64) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let o = build(&mut g, &v);
        g.shape(o).to_vec()
    };
    let readout = random(&out_shape, &mut rng);
    let (g, vars, loss) = loss_of(build, &inputs, &readout, None);
    let grads = g.backward(loss).unwrap();
    assert!(grads.all_finite(), "{name}: non-finite gradient");
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient reaches input").data().to_vec();
        let idx = spread_indices(input.numel(), 24);
        let numeric = central_difference(
            |x| {
                let mut probe = inputs.clone();
                probe[i] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                let (g, _, l) = loss_of(build, &probe, &readout, Some(i));
                g.value(l).item()
            },
            input.data(),
            &idx,
            H,
        );
        let a: Vec<f64> = idx.iter().map(|&j| analytic[j]).collect();
        let bad = mismatches(&idx, &a, &numeric, REL, ABS);
        assert!(bad.is_empty(), "{name} input {i}: {bad:?}");
    }
}

#[test]
fn matmul_shared_and_batched() {
    check_op("matmul", &|g, v| g.matmul(v[0], v[1]).unwrap(), &[&[3, 4], &[4, 2]], 1);
    check_op("matmul-shared", &|g, v| g.matmul(v[0], v[1]).unwrap(), &[&[2, 3, 4], &[4, 5]], 2);
    check_op("matmul-batched", &|g, v| g.matmul(v[0], v[1]).unwrap(), &[&[2, 3, 4], &[2, 4, 2]], 3);
}

#[test]
fn matmul_sum_gradient_wrt_left_operand() {
    // d/dA sum(A·B) = 1·Bᵀ, checked against finite differences.
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let eval = |av: &[f64], rg: bool| {
        let mut g = Graph::<f64>::new();
        let va = g.leaf(Tensor::new([2, 3], av.to_vec()).unwrap(), rg);
        let vb = g.constant(b.clone());
        let c = g.matmul(va, vb).unwrap();
        let s = g.sum(c);
        (g, va, s)
    };
    let (g, va, s) = eval(a.data(), true);
    let analytic = g.backward(s).unwrap().get(va).unwrap().data().to_vec();
    let idx: Vec<usize> = (0..6).collect();
    let numeric = central_difference(|x| { let (g, _, s) = eval(x, false); g.value(s).item() }, a.data(), &idx, H);
    assert!(mismatches(&idx, &analytic, &numeric, REL, ABS).is_empty());
}

#[test]
fn elementwise_ops() {
    check_op("add", &|g, v| g.add(v[0], v[1]).unwrap(), &[&[2, 3], &[2, 3]], 4);
    check_op("add-broadcast", &|g, v| g.add(v[0], v[1]).unwrap(), &[&[2, 2, 3], &[3]], 5);
    check_op("mul", &|g, v| g.mul(v[0], v[1]).unwrap(), &[&[2, 2], &[2, 2]], 6);
    check_op("mul-broadcast", &|g, v| g.mul(v[0], v[1]).unwrap(), &[&[3, 2, 2], &[2, 2]], 7);
    check_op("sub", &|g, v| g.sub(v[0], v[1]).unwrap(), &[&[4], &[4]], 8);
    check_op("scale", &|g, v| g.scale(v[0], -0.7), &[&[5]], 9);
    check_op("gelu", &|g, v| g.gelu(v[0]), &[&[3, 3]], 10);
}

#[test]
fn shape_ops() {
    check_op("transpose", &|g, v| g.transpose(v[0]).unwrap(), &[&[2, 3, 4]], 12);
    check_op("permute", &|g, v| g.permute(v[0], &[0, 2, 1, 3]).unwrap(), &[&[2, 3, 2, 2]], 13);
    check_op("reshape", &|g, v| g.reshape(v[0], &[6, 2]).unwrap(), &[&[3, 4]], 14);
    check_op("expand", &|g, v| g.expand(v[0], 3).unwrap(), &[&[2, 2]], 15);
    check_op("concat", &|g, v| g.concat(&[v[0], v[1]], 1).unwrap(), &[&[2, 1, 3], &[2, 2, 3]], 16);
    check_op("slice", &|g, v| g.slice(v[0], 1, 1, 2).unwrap(), &[&[2, 4, 3]], 17);
}

#[test]
fn normalizations_and_softmax() {
    check_op("softmax", &|g, v| g.softmax(v[0]), &[&[3, 4]], 18);
    check_op(
        "layer_norm",
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(),
        &[&[3, 4], &[4], &[4]],
        19,
    );
    check_op("l2_normalize", &|g, v| g.l2_normalize(v[0]), &[&[3, 4]], 20);
}

#[test]
fn distances_and_reductions() {
    check_op("sq_dist", &|g, v| g.sq_dist(v[0], v[1]).unwrap(), &[&[4, 3], &[2, 3]], 21);
    check_op("sum", &|g, v| g.sum(v[0]), &[&[2, 3]], 22);
    check_op("mean", &|g, v| g.mean(v[0]), &[&[2, 3]], 23);
    check_op("cross_entropy", &|g, v| g.cross_entropy(v[0], &[1, 0, 2]).unwrap(), &[&[3, 3]], 24);
}

#[test]
fn composite_attention_block() {
    // softmax(scale ⊙ q·kᵀ)·v, the shape of a scaled attention head.
    check_op(
        "attention",
        &|g, v| {
            let kt = g.transpose(v[1]).unwrap();
            let s = g.matmul(v[0], kt).unwrap();
            let s = g.mul(s, v[3]).unwrap();
            let a = g.softmax(s);
            g.matmul(a, v[2]).unwrap()
        },
        &[&[2, 3, 2], &[2, 3, 2], &[2, 3, 2], &[3, 3]],
        25,
    );
}

#[test]
fn layer_norm_matches_finite_differences_for_each_argument() {
    // 3×4 input; γ, β and a each perturbed separately.
    check_op(
        "layer_norm-3x4",
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(),
        &[&[3, 4], &[4], &[4]],
        26,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_inputs_agree_with_finite_differences(seed in 0u64..10_000) {
        check_op("matmul", &|g, v| g.matmul(v[0], v[1]).unwrap(), &[&[2, 3], &[3, 2]], seed);
        check_op("softmax", &|g, v| g.softmax(v[0]), &[&[2, 5]], seed);
        check_op("gelu", &|g, v| g.gelu(v[0]), &[&[6]], seed);
        check_op("layer_norm", &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(), &[&[2, 5], &[5], &[5]], seed);
    }
}
