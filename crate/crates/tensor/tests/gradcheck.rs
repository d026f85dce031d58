//! Central-difference checks of every op's backward pass.

use dreamview_tensor::{ops, Tensor, Var};

struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f32 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.next()).collect())
    }
}

/// Checks d(sum(w * f(inputs)))/d(inputs) against central differences.
fn check(inputs: Vec<Tensor>, f: impl Fn(&[Var]) -> Var, tol: f32) {
    let mut rng = Lcg(7);
    let probe_out = f(&inputs.iter().cloned().map(Var::constant).collect::<Vec<_>>());
    let weights = Var::constant(rng.tensor(probe_out.shape()));
    let objective = |vars: &[Var]| ops::sum(&ops::mul(&f(vars), &weights));

    let leaves: Vec<Var> = inputs.iter().cloned().map(Var::leaf).collect();
    objective(&leaves).backward();
    let h = 1e-2f32;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = leaves[i].grad().expect("gradient missing");
        let stride = (input.numel() / 12).max(1);
        for j in (0..input.numel()).step_by(stride) {
            let eval = |delta: f32| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut t = t.clone();
                        if k == i {
                            t.data_mut()[j] += delta;
                        }
                        Var::constant(t)
                    })
                    .collect();
                objective(&vars).value().item() as f64
            };
            let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            assert!(err < tol, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn linear_grad() {
    let mut r = Lcg(1);
    check(vec![r.tensor(&[2, 3, 5]), r.tensor(&[4, 5]), r.tensor(&[4])], |v| ops::linear(&v[0], &v[1], Some(&v[2])), 2e-3);
}

#[test]
fn conv_grad_padded_and_strided() {
    let mut r = Lcg(2);
    check(vec![r.tensor(&[2, 3, 6, 6]), r.tensor(&[4, 3, 3, 3]), r.tensor(&[4])], |v| ops::conv2d(&v[0], &v[1], &v[2], 1, 1), 3e-3);
    check(vec![r.tensor(&[1, 2, 6, 6]), r.tensor(&[3, 2, 3, 3]), r.tensor(&[3])], |v| ops::conv2d(&v[0], &v[1], &v[2], 2, 1), 3e-3);
    check(vec![r.tensor(&[2, 3, 4, 4]), r.tensor(&[5, 3, 1, 1]), r.tensor(&[5])], |v| ops::conv2d(&v[0], &v[1], &v[2], 1, 0), 3e-3);
}

#[test]
fn group_norm_grad() {
    let mut r = Lcg(3);
    check(vec![r.tensor(&[2, 4, 3, 3]), r.tensor(&[4]), r.tensor(&[4])], |v| ops::group_norm(&v[0], &v[1], &v[2], 2, 1e-5), 1e-2);
}

#[test]
fn attention_grad() {
    let mut r = Lcg(4);
    check(vec![r.tensor(&[2, 5, 4]), r.tensor(&[2, 3, 4]), r.tensor(&[2, 3, 6])], |v| ops::attention(&v[0], &v[1], &v[2]), 3e-3);
}

#[test]
fn layout_and_elementwise_grads() {
    let mut r = Lcg(5);
    check(vec![r.tensor(&[2, 3, 2, 2])], |v| ops::from_tokens(&ops::to_tokens(&ops::silu(&v[0])), 2, 2), 3e-3);
    check(vec![r.tensor(&[1, 2, 2, 3])], |v| ops::upsample2x(&v[0]), 3e-3);
    check(vec![r.tensor(&[2, 3, 2, 2]), r.tensor(&[2, 3])], |v| ops::add_channel_bias(&v[0], &v[1]), 3e-3);
    check(vec![r.tensor(&[2, 3, 4]), r.tensor(&[5, 4])], |v| ops::add_positional(&v[0], &v[1]), 3e-3);
    check(vec![r.tensor(&[6, 4])], |v| ops::concat(&[ops::embedding(&v[0], &[1, 1, 5]), ops::embedding(&v[0], &[0])]), 3e-3);
    check(vec![r.tensor(&[3, 2]), r.tensor(&[3, 2])], |v| ops::stack(&[ops::sub(&v[0], &v[1]), ops::scale(&v[1], 0.5)]), 3e-3);
}

#[test]
fn mse_grad_and_value() {
    let pred = Var::leaf(Tensor::new(&[2], vec![1.0, 3.0]));
    let loss = ops::mse(&pred, &Tensor::new(&[2], vec![0.0, 1.0]));
    assert_eq!(loss.value().item(), 2.5);
    loss.backward();
    assert_eq!(pred.grad().unwrap(), vec![1.0, 2.0]);
}

#[test]
fn constants_record_no_tape() {
    let a = Var::constant(Tensor::full(&[2], 1.0));
    let b = ops::silu(&ops::add(&a, &a));
    assert!(!b.requires_grad());
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Var::leaf(Tensor::new(&[1], vec![2.0]));
    let y = ops::mul(&x, &x);
    ops::sum(&ops::add(&y, &x)).backward();
    assert_eq!(x.grad().unwrap(), vec![5.0]);
}
