use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Central-difference check of `f` (graph builder) against the analytic
/// gradient with respect to a single leaf of shape `shape`.
fn grad_check<F>(f: F, shape: &[usize], seed: u64, tol: f64)
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Var<f64>,
{
    let x0 = rand_array(shape, seed);

    let tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = f(&tape, &x);
    let g = grad(&y, &[&x]);
    let analytic = g[0].val();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for idx in 0..x0.len() {
        let eval = |v: f64| {
            let mut xp = x0.clone();
            xp.as_slice_mut().unwrap()[idx] = v;
            let t = Tape::new();
            let xv = t.leaf(xp);
            f(&t, &xv).item()
        };
        let base = x0.as_slice().unwrap()[idx];
        let fd = (eval(base + eps) - eval(base - eps)) / (2.0 * eps);
        let an = analytic.as_slice().unwrap()[idx];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        let rel = (fd - an).abs() / denom;
        worst = worst.max(rel);
    }
    assert!(worst <= tol, "grad check failed: worst rel err {worst}");
}

#[test]
fn elementwise_grads() {
    grad_check(|t, x| {
        let c = t.leaf(rand_array(&[2, 3, 3], 7));
        x.mul(&c).add(&x.square()).sum_all()
    }, &[2, 3, 3], 1, 1e-6);
    grad_check(|t, x| {
        let c = t.leaf(rand_array(&[2, 3, 3], 8).mapv(|v| v + 2.5));
        x.div(&c).sub(&x.mul_scalar(0.3)).sum_all()
    }, &[2, 3, 3], 2, 1e-6);
}

#[test]
fn nonlinear_grads() {
    grad_check(|_t, x| x.add_scalar(3.0).sqrt().sum_all(), &[1, 4, 4], 3, 1e-6);
    grad_check(|_t, x| x.exp().sum_all(), &[1, 4, 4], 4, 1e-6);
    grad_check(|_t, x| x.sigmoid().sum_all(), &[1, 4, 4], 5, 1e-6);
    grad_check(|_t, x| x.leaky_relu(0.2).square().sum_all(), &[1, 4, 4], 6, 1e-5);
    grad_check(|_t, x| x.abs().sum_all(), &[1, 4, 4], 9, 1e-5);
}

#[test]
fn reduction_and_broadcast_grads() {
    grad_check(|_t, x| x.mean_all(), &[3, 4, 4], 10, 1e-6);
    grad_check(
        |_t, x| x.sum_ch().square().sum_all(),
        &[3, 4, 4],
        11,
        1e-6,
    );
    grad_check(
        |_t, x| {
            let m = x.sum_ch().mul_scalar(1.0 / 16.0);
            x.sub(&m.broadcast_ch(4, 4)).square().sum_all()
        },
        &[3, 4, 4],
        12,
        1e-6,
    );
}

#[test]
fn shape_op_grads() {
    grad_check(|_t, x| x.pad2d(1, 2, 0, 1).square().sum_all(), &[2, 4, 4], 13, 1e-6);
    grad_check(|_t, x| x.crop2d(1, 1, 1, 1).square().sum_all(), &[2, 5, 5], 14, 1e-6);
    grad_check(|_t, x| x.dilate2(2).square().sum_all(), &[1, 3, 3], 15, 1e-6);
    grad_check(|_t, x| x.subsample2(2).square().sum_all(), &[1, 5, 5], 16, 1e-6);
    grad_check(|_t, x| x.flip_hw().mul(&x.clone()).sum_all(), &[1, 4, 4], 17, 1e-6);
    grad_check(|_t, x| x.upsample2().square().sum_all(), &[2, 3, 3], 18, 1e-6);
    grad_check(|_t, x| x.downsum2().square().sum_all(), &[2, 4, 4], 19, 1e-6);
    grad_check(|_t, x| x.slice_ch(1, 3).square().sum_all(), &[4, 3, 3], 20, 1e-6);
    grad_check(|_t, x| x.embed_ch(2, 5).square().sum_all(), &[2, 3, 3], 21, 1e-6);
    grad_check(
        |t, x| {
            let other = t.leaf(rand_array(&[2, 3, 3], 22));
            t.concat_ch(&[x, &other]).square().sum_all()
        },
        &[3, 3, 3],
        23,
        1e-6,
    );
}

#[test]
fn conv_forward_matches_direct_loops() {
    let x = rand_array(&[2, 6, 7], 30);
    let w = rand_array(&[3, 2, 3, 3], 31);
    for &(stride, pad, kdil) in &[(1usize, 1usize, 1usize), (2, 1, 1), (1, 0, 2), (2, 2, 1)] {
        let tape = Tape::<f64>::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = xv.conv2d(&wv, stride, pad, kdil);
        let yv = y.val();
        let (oh, ow) = (yv.shape()[1], yv.shape()[2]);
        for o in 0..3 {
            for i0 in 0..oh {
                for j0 in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..3 {
                                let si = (i0 * stride + a * kdil) as isize - pad as isize;
                                let sj = (j0 * stride + b * kdil) as isize - pad as isize;
                                if si >= 0 && si < 6 && sj >= 0 && sj < 7 {
                                    acc += x[[c, si as usize, sj as usize]] * w[[o, c, a, b]];
                                }
                            }
                        }
                    }
                    let got = yv[[o, i0, j0]];
                    assert!((got - acc).abs() < 1e-12, "conv mismatch at ({o},{i0},{j0})");
                }
            }
        }
    }
}

#[test]
fn conv_input_grad() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        grad_check(
            move |t, x| {
                let w = t.leaf(rand_array(&[3, 2, 3, 3], 40));
                x.conv2d(&w, stride, pad, 1).square().sum_all()
            },
            &[2, 6, 6],
            41,
            1e-5,
        );
    }
    // 4x4 stride-2 kernel, as used by the critic
    grad_check(
        |t, x| {
            let w = t.leaf(rand_array(&[2, 1, 4, 4], 42));
            x.conv2d(&w, 2, 1, 1).square().sum_all()
        },
        &[1, 8, 8],
        43,
        1e-5,
    );
}

#[test]
fn conv_kernel_grad() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        grad_check(
            move |t, w| {
                let x = t.leaf(rand_array(&[2, 6, 6], 50));
                x.conv2d(w, stride, pad, 1).square().sum_all()
            },
            &[3, 2, 3, 3],
            51,
            1e-5,
        );
    }
}

#[test]
fn second_order_through_input_gradient() {
    // y = conv(x, w); s = sum of squares of dy/dx must be differentiable in w.
    let x0 = rand_array(&[1, 5, 5], 60);
    let w0 = rand_array(&[1, 1, 3, 3], 61);

    let eval = |w: &ArrayD<f64>| {
        let t = Tape::<f64>::new();
        let x = t.leaf(x0.clone());
        let wv = t.leaf(w.clone());
        let y = x.conv2d(&wv, 1, 1, 1).square().sum_all();
        let gx = grad(&y, &[&x]).remove(0);
        (t, wv, gx.square().sum_all())
    };

    let (_t, wv, s) = eval(&w0);
    let gw = grad(&s, &[&wv]).remove(0);
    let gwv = gw.val();

    let eps = 1e-6;
    for idx in 0..w0.len() {
        let mut wp = w0.clone();
        wp.as_slice_mut().unwrap()[idx] += eps;
        let sp = eval(&wp).2.item();
        let mut wm = w0.clone();
        wm.as_slice_mut().unwrap()[idx] -= eps;
        let sm = eval(&wm).2.item();
        let fd = (sp - sm) / (2.0 * eps);
        let an = gwv.as_slice().unwrap()[idx];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            ((fd - an).abs() / denom) < 1e-4,
            "second order mismatch: fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn detach_blocks_gradient() {
    let t = Tape::<f64>::new();
    let x = t.leaf(rand_array(&[1, 3, 3], 70));
    let y = x.detach().square().sum_all();
    let g = grad(&y, &[&x]).remove(0);
    assert!(g.val().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_accumulates_over_shared_subexpressions() {
    let t = Tape::<f64>::new();
    let x = t.scalar(3.0);
    let y = x.mul(&x).add(&x.mul_scalar(2.0)); // x^2 + 2x, dy/dx = 2x + 2 = 8
    let g = grad(&y, &[&x]).remove(0);
    assert!((g.item() - 8.0).abs() < 1e-12);
}

#[test]
fn f32_tape_smoke() {
    let t = Tape::<f32>::new();
    let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.5f32));
    let w = t.leaf(ArrayD::from_elem(IxDyn(&[2, 1, 3, 3]), 0.1f32));
    let y = x.conv2d(&w, 1, 1, 1).sigmoid().mean_all();
    let g = grad(&y, &[&w]).remove(0);
    assert!(y.item().is_finite());
    assert!(g.val().iter().all(|v| v.is_finite()));
}
