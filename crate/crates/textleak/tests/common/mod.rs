//! Shared helpers for the integration suites: finite-difference oracles and
//! tolerance assertions.

#![allow(dead_code)]

use textleak::tape::{Tape, Var};
use textleak::tensor::Tensor;

/// Builds a scalar tape value from leaf inputs. Implementations must be
/// pure: same inputs, same scalar.
pub type ScalarFn = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Evaluates a scalar-valued tape program on the given inputs.
pub fn eval_scalar<F: Fn(&mut Tape, &[Var]) -> Var + ?Sized>(f: &F, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.item(out)
}

/// Reverse-mode gradients of a scalar-valued tape program.
pub fn ad_gradients<F: Fn(&mut Tape, &[Var]) -> Var + ?Sized>(f: &F, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out, &vars, false).unwrap();
    grads.into_iter().map(|g| tape.to_tensor(g)).collect()
}

/// Central finite differences of the same program, one input at a time.
pub fn fd_gradients<F: Fn(&mut Tape, &[Var]) -> Var + ?Sized>(f: &F, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape.clone());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            grad.data[j] = (eval_scalar(f, &plus) - eval_scalar(f, &minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Relative error with a unit floor, so tiny gradients are compared
/// absolutely and large ones relatively.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Asserts reverse-mode gradients match central finite differences within
/// `tol` for every element of every input. Returns the worst error seen.
pub fn assert_grads_match<F: Fn(&mut Tape, &[Var]) -> Var + ?Sized>(
    name: &str,
    f: &F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> f64 {
    let ad = ad_gradients(f, inputs);
    let fd = fd_gradients(f, inputs, h);
    let mut worst = 0.0f64;
    for (i, (a, b)) in ad.iter().zip(&fd).enumerate() {
        for j in 0..a.numel() {
            let e = rel_err(a.data[j], b.data[j]);
            assert!(
                e <= tol,
                "{name}: input {i} element {j}: reverse {} vs finite-diff {} (err {e:.3e} > {tol:.1e})",
                a.data[j],
                b.data[j]
            );
            worst = worst.max(e);
        }
    }
    worst
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}
