//! Finite-difference verification of every differentiable op.
//!
//! The numeric side re-runs the forward closure; it never touches the
//! reverse pass, so these tests are an independent oracle for it.

use super::finite_diff::compare_at;
use super::{Arr, Tape, Var};
use crate::rng::Stream;
use ndarray::{ArrayD, IxDyn};

fn random_arr(shape: &[usize], stream: &mut Stream) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| stream.next_gaussian() * 0.5).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Builds a scalar loss from `x` (plus fixed side inputs), checks d/dx
/// against central differences at `n_points` random coordinates.
fn check_input_grad<F>(name: &str, x: Arr, build: F, n_points: usize, tol: f64)
where
    F: FnMut(&mut Tape, Var) -> Var,
{
    check_input_grad_step(name, x, build, n_points, tol, 1e-3)
}

/// As [`check_input_grad`] with an explicit finite-difference step. Smooth
/// ops with small per-coordinate gradients need a larger step to stay above
/// the f32 quantization noise of the loss.
fn check_input_grad_step<F>(
    name: &str,
    x: Arr,
    mut build: F,
    n_points: usize,
    tol: f64,
    step: f32,
) where
    F: FnMut(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&mut tape, xv);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv, &tape);

    let mut f = |xp: &Arr| {
        let mut t = Tape::new();
        let v = t.leaf(xp.clone());
        let l = build(&mut t, v);
        t.scalar(l)
    };
    let mut pick = Stream::new(99, name);
    let coords: Vec<usize> = (0..n_points).map(|_| pick.next_index(x.len())).collect();
    let pts = compare_at(&mut f, &x, &analytic, &coords, step, 1e-4);
    for (i, p) in pts.iter().enumerate() {
        assert!(
            p.rel_err < tol,
            "{name}: coord {} analytic {} vs numeric {} (rel err {})",
            coords[i],
            p.analytic,
            p.numeric,
            p.rel_err
        );
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut s = Stream::new(11, "ew");
    let x = random_arr(&[3, 4], &mut s);
    let other = random_arr(&[3, 4], &mut s);

    let o = other.clone();
    check_input_grad("add", x.clone(), move |t, v| {
        let b = t.leaf(o.clone());
        let y = t.add(v, b).unwrap();
        t.mean_all(y)
    }, 6, 1e-3);

    let o = other.clone();
    check_input_grad("sub", x.clone(), move |t, v| {
        let b = t.leaf(o.clone());
        let y = t.sub(v, b).unwrap();
        t.mean_all(y)
    }, 6, 1e-3);

    let o = other.clone();
    check_input_grad("mul", x.clone(), move |t, v| {
        let b = t.leaf(o.clone());
        let y = t.mul(v, b).unwrap();
        t.mean_all(y)
    }, 6, 1e-3);

    check_input_grad("scale_addconst", x.clone(), |t, v| {
        let y = t.scale(v, -1.7);
        let y = t.add_const(y, 0.3);
        t.mean_all(y)
    }, 6, 1e-3);

    check_input_grad("tanh", x.clone(), |t, v| {
        let y = t.tanh(v);
        t.mean_all(y)
    }, 6, 1e-3);

    // abs / relu / leaky kink at 0: random gaussians are almost surely away
    // from it at the 1e-3 step scale, retry-free.
    check_input_grad("abs", x.clone(), |t, v| {
        let y = t.abs(v);
        t.mean_all(y)
    }, 6, 1e-2);

    check_input_grad("relu", x.clone(), |t, v| {
        let y = t.relu(v);
        t.mean_all(y)
    }, 6, 1e-2);

    check_input_grad("leaky_relu", x, |t, v| {
        let y = t.leaky_relu(v, 0.2);
        t.mean_all(y)
    }, 6, 1e-2);
}

#[test]
fn matmul_and_bias_match_finite_differences() {
    let mut s = Stream::new(12, "mm");
    let x = random_arr(&[4, 5], &mut s);
    let w = random_arr(&[5, 3], &mut s);
    let b = random_arr(&[3], &mut s);

    let (wc, bc) = (w.clone(), b.clone());
    check_input_grad("matmul_x", x.clone(), move |t, v| {
        let wv = t.leaf(wc.clone());
        let bv = t.leaf(bc.clone());
        let y = t.matmul(v, wv).unwrap();
        let y = t.add_bias_rows(y, bv).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-3);

    // Gradient w.r.t. the weight, checked by swapping roles.
    let xc = x.clone();
    check_input_grad("matmul_w", w, move |t, v| {
        let xv = t.leaf(xc.clone());
        let y = t.matmul(xv, v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-3);

    let xc = x;
    check_input_grad("bias_rows", b, move |t, v| {
        let xv = t.leaf(xc.clone());
        let w2 = t.leaf(ArrayD::from_elem(IxDyn(&[5, 3]), 0.1));
        let y = t.matmul(xv, w2).unwrap();
        let y = t.add_bias_rows(y, v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 3, 1e-3);
}

#[test]
fn conv2d_matches_finite_differences() {
    let mut s = Stream::new(13, "conv");
    let x = random_arr(&[2, 3, 6, 6], &mut s);
    let w = random_arr(&[4, 3, 3, 3], &mut s);
    let b = random_arr(&[4], &mut s);

    let (wc, bc) = (w.clone(), b.clone());
    check_input_grad("conv2d_x", x.clone(), move |t, v| {
        let wv = t.leaf(wc.clone());
        let bv = t.leaf(bc.clone());
        let y = t.conv2d(v, wv, 1, 1, false).unwrap();
        let y = t.add_bias_channels(y, bv).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 10, 1e-2);

    // Loss scaled up so coordinates with tiny gradients stay above the f32
    // finite-difference noise floor.
    // Linear-in-w loss with a fixed random mask: finite differences are
    // exact, while the mask keeps the upstream gradient non-constant.
    let xc = x.clone();
    let mask = random_arr(&[2, 4, 3, 3], &mut s);
    check_input_grad_step("conv2d_w", w, move |t, v| {
        let xv = t.leaf(xc.clone());
        let mv = t.leaf(mask.clone());
        let y = t.conv2d(xv, v, 2, 1, false).unwrap();
        let y = t.mul(y, mv).unwrap();
        let m = t.mean_all(y);
        t.scale(m, 64.0)
    }, 10, 1e-2, 1e-2);

    let xc = x;
    check_input_grad("conv2d_bias", b, move |t, v| {
        let xv = t.leaf(xc.clone());
        let wv = t.leaf(ArrayD::from_elem(IxDyn(&[4, 3, 3, 3]), 0.05));
        let y = t.conv2d(xv, wv, 1, 0, false).unwrap();
        let y = t.add_bias_channels(y, v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 4, 1e-2);
}

#[test]
fn conv_transpose2d_matches_finite_differences() {
    let mut s = Stream::new(14, "convt");
    let x = random_arr(&[2, 4, 4, 4], &mut s);
    let w = random_arr(&[4, 3, 4, 4], &mut s);

    let wc = w.clone();
    check_input_grad("convt_x", x.clone(), move |t, v| {
        let wv = t.leaf(wc.clone());
        let y = t.conv_transpose2d(v, wv, 2, 1, false).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 10, 1e-2);

    let xc = x;
    check_input_grad("convt_w", w, move |t, v| {
        let xv = t.leaf(xc.clone());
        let y = t.conv_transpose2d(xv, v, 2, 1, false).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 10, 1e-2);
}

#[test]
fn conv_transpose_output_shape_doubles_spatial_dims() {
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 4, 4])));
    let w = tape.leaf(ArrayD::zeros(IxDyn(&[4, 2, 4, 4])));
    let y = tape.conv_transpose2d(x, w, 2, 1, false).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 8, 8]);
}

#[test]
fn pooling_and_resize_match_finite_differences() {
    let mut s = Stream::new(15, "pool");
    let x = random_arr(&[2, 3, 6, 6], &mut s);

    check_input_grad("max_pool2", x.clone(), |t, v| {
        let y = t.max_pool2(v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-2);

    check_input_grad("global_avg_pool", x.clone(), |t, v| {
        let y = t.global_avg_pool(v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-3);

    check_input_grad("upsample_bilinear", x, |t, v| {
        let y = t.upsample_bilinear(v, 13, 9).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-2);
}

#[test]
fn batch_norm_matches_finite_differences() {
    let mut s = Stream::new(16, "bn");
    let x = random_arr(&[3, 2, 4, 4], &mut s);
    let gamma = random_arr(&[2], &mut s);
    let beta = random_arr(&[2], &mut s);

    let (gc, bc) = (gamma.clone(), beta.clone());
    check_input_grad_step("bn_x", x.clone(), move |t, v| {
        let gv = t.leaf(gc.clone());
        let bv = t.leaf(bc.clone());
        let (y, _, _) = t.batch_norm(v, gv, bv, 1e-5).unwrap();
        let y = t.tanh(y);
        let m = t.mean_all(y);
        t.scale(m, 64.0)
    }, 10, 1e-2, 1e-2);

    let (xc, bc) = (x.clone(), beta);
    check_input_grad("bn_gamma", gamma, move |t, v| {
        let xv = t.leaf(xc.clone());
        let bv = t.leaf(bc.clone());
        let (y, _, _) = t.batch_norm(xv, v, bv, 1e-5).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 2, 1e-2);

    check_input_grad("channel_affine", x, |t, v| {
        let y = t.channel_affine(v, vec![1.3, -0.4], vec![0.2, 0.7]).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 6, 1e-2);
}

#[test]
fn row_ops_match_finite_differences() {
    let mut s = Stream::new(17, "rows");
    let x = random_arr(&[4, 6], &mut s);
    let protos = random_arr(&[3, 6], &mut s);
    let idx = vec![2usize, 0, 1, 2];

    check_input_grad("normalize_rows", x.clone(), |t, v| {
        let y = t.normalize_rows(v).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 8, 1e-2);

    let (pc, ic) = (protos.clone(), idx.clone());
    check_input_grad("row_dot_a", x.clone(), move |t, v| {
        let pv = t.leaf(pc.clone());
        let sel = t.rows_by_index(pv, &ic).unwrap();
        let d = t.row_dot(v, sel).unwrap();
        t.mean_all(d)
    }, 8, 1e-3);

    let xc = x.clone();
    check_input_grad("rows_by_index_m", protos, move |t, v| {
        let xv = t.leaf(xc.clone());
        let sel = t.rows_by_index(v, &idx).unwrap();
        let norm = t.normalize_rows(sel).unwrap();
        let d = t.row_dot(xv, norm).unwrap();
        t.mean_all(d)
    }, 8, 1e-2);

    let oc = x.clone();
    check_input_grad("concat_cols", x, move |t, v| {
        let b = t.leaf(oc.clone());
        let y = t.concat_cols(v, b).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 6, 1e-3);
}

#[test]
fn cross_entropy_matches_finite_differences_and_direct_formula() {
    let mut s = Stream::new(18, "ce");
    let logits = random_arr(&[5, 7], &mut s);
    let targets = vec![0usize, 3, 6, 2, 2];

    // Direct -log softmax oracle, computed with plain f64 scalar math.
    let mut expect = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = (0..7).map(|c| logits[[r, c]] as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        expect += z.ln() - (row[t] - m);
    }
    expect /= targets.len() as f64;

    let mut tape = Tape::new();
    let lv = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(lv, &targets).unwrap();
    assert!(
        (tape.scalar(loss) as f64 - expect).abs() < 1e-6,
        "cross entropy {} vs direct {}",
        tape.scalar(loss),
        expect
    );

    let tc = targets.clone();
    check_input_grad("cross_entropy", logits, move |t, v| {
        t.cross_entropy(v, &tc).unwrap()
    }, 10, 1e-2);
}

#[test]
fn uniform_logits_give_ln_c() {
    let mut tape = Tape::new();
    let logits = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 10]), 0.42));
    let loss = tape.cross_entropy(logits, &[4, 9]).unwrap();
    assert!((tape.scalar(loss) - (10.0f32).ln()).abs() < 1e-6);
}

#[test]
fn reshape_roundtrips_gradients() {
    let mut s = Stream::new(19, "rs");
    let x = random_arr(&[2, 3, 4], &mut s);
    check_input_grad("reshape", x, |t, v| {
        let y = t.reshape(v, &[6, 4]).unwrap();
        let y = t.tanh(y);
        t.mean_all(y)
    }, 6, 1e-3);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 2])));
    let y = tape.relu(x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn frozen_weight_conv_skips_weight_gradient() {
    let mut s = Stream::new(20, "frozen");
    let x = random_arr(&[1, 2, 4, 4], &mut s);
    let w = random_arr(&[3, 2, 3, 3], &mut s);
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let y = tape.conv2d(xv, wv, 1, 1, true).unwrap();
    let l = tape.mean_all(y);
    let grads = tape.backward(l).unwrap();
    assert!(grads.get_ref(wv).is_none(), "frozen weight must get no grad");
    assert!(grads.get_ref(xv).is_some(), "input grad must still flow");
}
