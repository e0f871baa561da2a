//! Every differentiable operation against central finite differences.

use std::sync::Arc;

use movad_tensor::gradcheck::{central_difference, max_relative_error};
use movad_tensor::{concat_rows, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Checks the gradient of `sum(build(inputs) * probe)` for every input.
fn check<F>(inputs: Vec<Tensor>, build: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = build(&tape, &vars).shape();
        random(&shape, &mut rng)
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars).value();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars);
    let loss = out.mul(tape.constant(probe.clone())).sum();
    let grads = tape.backward(loss);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i]);
        let idx: Vec<usize> = (0..input.numel()).collect();
        let numeric = central_difference(
            |x| {
                let mut ins = inputs.clone();
                ins[i] = x.clone();
                eval(&ins)
            },
            input,
            &idx,
            1e-6,
        );
        let err = max_relative_error(analytic.data(), &numeric, 1e-6);
        assert!(err < 1e-6, "input {i}: relative error {err:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn linear_with_and_without_bias() {
    let mut r = rng();
    check(
        vec![random(&[2, 3, 4], &mut r), random(&[5, 4], &mut r), random(&[5], &mut r)],
        |_, v| v[0].linear(v[1], Some(v[2])),
    );
    check(vec![random(&[3, 4], &mut r), random(&[2, 4], &mut r)], |_, v| v[0].linear(v[1], None));
}

#[test]
fn bmm_all_transpose_combinations() {
    let mut r = rng();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(vec![random(&a, &mut r), random(&b, &mut r)], move |_, v| v[0].bmm(v[1], ta, tb));
    }
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let (a, b) = (random(&[3, 4], &mut r), random(&[3, 4], &mut r));
    check(vec![a.clone(), b.clone()], |_, v| v[0].add(v[1]));
    check(vec![a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
    check(vec![a.clone(), random(&[4], &mut r)], |_, v| v[0].add_broadcast(v[1]));
    check(vec![a.clone()], |_, v| v[0].scale(-2.5));
    check(vec![a.clone()], |_, v| v[0].gelu());
    check(vec![a.clone()], |_, v| v[0].sigmoid());
    check(vec![a.clone()], |_, v| v[0].tanh());
    check(vec![a.clone()], |_, v| v[0].softmax());
    check(vec![a], |_, v| v[0].mul(v[0]).sum());
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let a = random(&[2, 3, 4], &mut r);
    check(vec![a.clone()], |_, v| v[0].reshape([6, 4]));
    check(vec![a.clone()], |_, v| v[0].permute(&[2, 0, 1]));
    check(vec![a.clone()], |_, v| v[0].narrow(1, 1, 2));
    check(vec![a.clone()], |_, v| v[0].mean_dim(1));
    let index: Arc<[Option<usize>]> = vec![Some(5), None, Some(0), Some(5), Some(2)].into();
    check(vec![a.clone()], move |_, v| v[0].gather_rows(4, index.clone()));
    check(vec![random(&[2, 3], &mut r), random(&[1, 3], &mut r)], |_, v| concat_rows(&[v[0], v[1], v[0]]));
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng();
    check(
        vec![random(&[3, 5], &mut r), random(&[5], &mut r), random(&[5], &mut r)],
        |_, v| v[0].layer_norm(v[1], v[2], 1e-5),
    );
}

#[test]
fn weighted_cross_entropy_logits() {
    let mut r = rng();
    check(vec![random(&[6, 2], &mut r).reshape([6, 2]).unwrap()], |_, v| {
        v[0].scale(3.0).weighted_cross_entropy(&[0, 1, 1, 0, 1, 0], &[0.3, 0.7])
    });
}

#[test]
fn gradients_accumulate_over_shared_subexpressions() {
    // d/dx sum(tanh(x) * tanh(x) + x) = 2 tanh(x) (1 - tanh^2 x) + 1
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new([3], vec![-0.5, 0.1, 0.9]).unwrap());
    let t = x.tanh();
    let loss = t.mul(t).add(x).sum();
    let g = tape.backward(loss);
    for (gi, xi) in g.get(x).unwrap().data().iter().zip([-0.5_f64, 0.1, 0.9]) {
        let th = xi.tanh();
        assert!((gi - (2.0 * th * (1.0 - th * th) + 1.0)).abs() < 1e-14);
    }
}
