//! Property suite for the differentiation tape: every exported operation is
//! checked against central finite differences on seeded random inputs, plus
//! determinism and second-order (gradient-of-gradient) checks.

mod common;

use common::{assert_close, assert_grads_match, ScalarFn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textleak::tape::Tape;
use textleak::tensor::Tensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const CASES: usize = 100;

fn rng(case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x7ea9 + case)
}

/// Random tensor with entries kept away from the kinks of abs/sign/sqrt so
/// finite differences stay valid.
fn smooth_rand(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = 0.2 + r.gen::<f64>() * 1.5;
            if r.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Weighted sum against fixed constants, so every output element gets a
/// distinct adjoint and structural mistakes cannot cancel out.
fn probe(tape: &mut Tape, v: textleak::tape::Var, seed: u64) -> textleak::tape::Var {
    let shape = tape.shape(v).to_vec();
    let numel: usize = shape.iter().product();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::new(shape, (0..numel).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect());
    let wc = tape.constant(w).unwrap();
    let p = tape.mul(v, wc).unwrap();
    tape.sum(p).unwrap()
}

fn check_unary(
    name: &str,
    shape: Vec<usize>,
    f: impl Fn(&mut Tape, textleak::tape::Var) -> textleak::tape::Var + Copy + 'static,
) {
    for case in 0..CASES as u64 {
        let x = smooth_rand(shape.clone(), &mut rng(case));
        let g: Box<ScalarFn> = Box::new(move |t, vs| {
            let y = f(t, vs[0]);
            probe(t, y, case)
        });
        assert_grads_match(name, &g, &[x], H, TOL);
    }
}

#[test]
fn grad_add_sub_mul_neg() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let a = smooth_rand(vec![3, 4], &mut r);
        let b = smooth_rand(vec![3, 4], &mut r);
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let s = t.add(vs[0], vs[1]).unwrap();
            let d = t.sub(s, vs[1]).unwrap();
            let m = t.mul(d, vs[1]).unwrap();
            let n = t.neg(m).unwrap();
            probe(t, n, case)
        });
        assert_grads_match("add/sub/mul/neg", &f, &[a, b], H, TOL);
    }
}

#[test]
fn grad_scale_add_scalar_smul() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let s = Tensor::scalar(0.3 + r.gen::<f64>());
        let x = smooth_rand(vec![2, 5], &mut r);
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let a = t.scale(vs[1], -1.7).unwrap();
            let b = t.add_scalar(a, 0.4).unwrap();
            let c = t.smul(vs[0], b).unwrap();
            probe(t, c, case)
        });
        assert_grads_match("scale/add_scalar/smul", &f, &[s, x], H, TOL);
    }
}

#[test]
fn grad_matmul_transpose() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let a = smooth_rand(vec![3, 4], &mut r);
        let b = smooth_rand(vec![4, 2], &mut r);
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let p = t.matmul(vs[0], vs[1]).unwrap();
            let pt = t.transpose(p).unwrap();
            probe(t, pt, case)
        });
        assert_grads_match("matmul/transpose", &f, &[a, b], H, TOL);
    }
}

#[test]
fn grad_row_softmax() {
    check_unary("row_softmax", vec![3, 5], |t, v| t.row_softmax(v).unwrap());
}

#[test]
fn grad_tanh_gelu() {
    check_unary("tanh", vec![2, 6], |t, v| t.tanh(v).unwrap());
    check_unary("gelu", vec![2, 6], |t, v| t.gelu(v).unwrap());
}

#[test]
fn grad_sqrt_safe_recip() {
    // Strictly positive inputs (shifted) keep both ops smooth.
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let mut x = smooth_rand(vec![2, 4], &mut r);
        for v in &mut x.data {
            *v = v.abs() + 0.3;
        }
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let s = t.sqrt(vs[0]).unwrap();
            let i = t.safe_recip(s).unwrap();
            probe(t, i, case)
        });
        assert_grads_match("sqrt/safe_recip", &f, &[x], H, TOL);
    }
}

#[test]
fn grad_abs_l1() {
    check_unary("abs", vec![3, 3], |t, v| t.abs(v).unwrap());
    for case in 0..CASES as u64 {
        let x = smooth_rand(vec![7], &mut rng(case));
        let f: Box<ScalarFn> = Box::new(|t, vs| t.l1_norm(vs[0]).unwrap());
        assert_grads_match("l1_norm", &f, &[x], H, TOL);
    }
}

#[test]
fn grad_l2_norm_dot() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let a = smooth_rand(vec![6], &mut r);
        let b = smooth_rand(vec![6], &mut r);
        let f: Box<ScalarFn> = Box::new(|t, vs| {
            let n = t.l2_norm(vs[0]).unwrap();
            let d = t.dot(vs[0], vs[1]).unwrap();
            t.add(n, d).unwrap()
        });
        assert_grads_match("l2_norm/dot", &f, &[a, b], H, TOL);
    }
}

#[test]
fn grad_reductions_broadcasts() {
    for case in 0..CASES as u64 {
        let x = smooth_rand(vec![3, 4], &mut rng(case));
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let rs = t.row_sum(vs[0]).unwrap();
            let cb = t.broadcast_col(rs, 4).unwrap();
            let cs = t.col_sum(cb).unwrap();
            let rb = t.broadcast_row(cs, 3).unwrap();
            let m = t.mean(rb).unwrap();
            let s = t.sum(vs[0]).unwrap();
            let both = t.add(m, s).unwrap();
            probe(t, both, case)
        });
        assert_grads_match("row/col sums and broadcasts", &f, &[x], H, TOL);
    }
}

#[test]
fn grad_concat_slice_pad_reshape() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let a = smooth_rand(vec![2, 3], &mut r);
        let b = smooth_rand(vec![2, 3], &mut r);
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let rows = t.concat_rows(&[vs[0], vs[1]]).unwrap();
            let cols = t.concat_cols(&[vs[0], vs[1]]).unwrap();
            let sl = t.slice(rows, 1, 3, 0, 2).unwrap();
            let pd = t.pad(sl, 4, 6, 1, 2).unwrap();
            let rs = t.reshape(cols, vec![4, 3]).unwrap();
            let p1 = probe(t, pd, case);
            let p2 = probe(t, rs, case + 1);
            t.add(p1, p2).unwrap()
        });
        assert_grads_match("concat/slice/pad/reshape", &f, &[a, b], H, TOL);
    }
}

#[test]
fn grad_lookup_scatter() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let table = smooth_rand(vec![5, 3], &mut r);
        let rows = smooth_rand(vec![4, 3], &mut r);
        let ids: Vec<u32> = (0..4).map(|_| r.gen_range(0..5)).collect();
        let ids2 = ids.clone();
        let f: Box<ScalarFn> = Box::new(move |t, vs| {
            let g = t.lookup(vs[0], &ids).unwrap();
            let sc = t.scatter_rows(vs[1], &ids, 5).unwrap();
            let p1 = probe(t, g, case);
            let p2 = probe(t, sc, case + 7);
            t.add(p1, p2).unwrap()
        });
        assert_grads_match("lookup/scatter_rows", &f, &[table, rows], H, TOL);
        drop(ids2);
    }
}

#[test]
fn grad_cross_entropy() {
    for case in 0..CASES as u64 {
        let mut r = rng(case);
        let logits = smooth_rand(vec![3, 6], &mut r);
        let targets: Vec<u32> = (0..3).map(|_| r.gen_range(0..6)).collect();
        let f: Box<ScalarFn> = Box::new(move |t, vs| t.cross_entropy(vs[0], &targets).unwrap());
        assert_grads_match("cross_entropy", &f, &[logits], H, TOL);
    }
}

#[test]
fn grad_layer_norm() {
    check_unary("layer_norm", vec![3, 6], |t, v| t.layer_norm(v, 1e-6).unwrap());
}

/// Gradients are bit-identical across repeated runs of the same program.
#[test]
fn backward_is_deterministic_across_tapes() {
    let build = |seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![4, 4], 1.0, &mut r);
        let w = Tensor::randn(vec![4, 4], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x).unwrap();
        let wv = tape.leaf(w).unwrap();
        let h = tape.matmul(xv, wv).unwrap();
        let a = tape.tanh(h).unwrap();
        let sm = tape.row_softmax(a).unwrap();
        let l = tape.cross_entropy(sm, &[0, 1, 2, 3]).unwrap();
        let g = tape.backward(l, &[xv, wv], false).unwrap();
        (tape.to_tensor(g[0]), tape.to_tensor(g[1]))
    };
    let (a1, b1) = build(41);
    let (a2, b2) = build(41);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

/// Second-order check on a two-layer tanh network: phi(X) is the squared
/// norm of the weight gradients (computed with create_graph), and d phi/dX
/// from a second backward pass must match finite differences of phi.
#[test]
fn second_order_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let x0 = Tensor::randn(vec![3, 4], 0.8, &mut r);
    let w1 = Tensor::randn(vec![4, 4], 0.7, &mut r);
    let w2 = Tensor::randn(vec![4, 2], 0.9, &mut r);

    let phi = |x: &Tensor| -> (f64, Option<Tensor>) {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone()).unwrap();
        let w1v = t.leaf(w1.clone()).unwrap();
        let w2v = t.leaf(w2.clone()).unwrap();
        let h1 = t.matmul(xv, w1v).unwrap();
        let a1 = t.tanh(h1).unwrap();
        let h2 = t.matmul(a1, w2v).unwrap();
        let a2 = t.tanh(h2).unwrap();
        let loss = t.sum(a2).unwrap();
        let grads = t.backward(loss, &[w1v, w2v], true).unwrap();
        let sq1 = t.dot(grads[0], grads[0]).unwrap();
        let sq2 = t.dot(grads[1], grads[1]).unwrap();
        let phi = t.add(sq1, sq2).unwrap();
        let val = t.item(phi);
        let gx = t.backward(phi, &[xv], false).unwrap();
        (val, Some(t.to_tensor(gx[0])))
    };

    let (_, gx) = phi(&x0);
    let gx = gx.unwrap();

    let h = 1e-4;
    let mut worst = 0.0f64;
    for j in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data[j] += h;
        let mut minus = x0.clone();
        minus.data[j] -= h;
        let fd = (phi(&plus).0 - phi(&minus).0) / (2.0 * h);
        let e = common::rel_err(gx.data[j], fd);
        worst = worst.max(e);
        assert!(e <= 1e-5, "element {j}: reverse {} vs fd {fd} (err {e:.2e})", gx.data[j]);
    }
    assert!(worst > 0.0, "degenerate second-order test");
}

/// The layer norm composition standardizes rows and stays differentiable
/// through both statistics.
#[test]
fn layer_norm_statistics() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = Tensor::randn(vec![4, 8], 2.0, &mut r);
        let mut t = Tape::new();
        let xv = t.leaf(x).unwrap();
        let y = t.layer_norm(xv, 1e-6).unwrap();
        let d = t.data(y);
        for row in 0..4 {
            let row = &d[row * 8..(row + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert_close(mean, 0.0, 1e-9, "layer_norm row mean");
            assert_close(var, 1.0, 1e-3, "layer_norm row variance");
        }
    }
}
