//! Shared oracles for integration tests: an independent windowed-SSIM
//! implementation and central-finite-difference gradient probes. Written
//! against plain slices/closures so they share no code with the crate
//! internals they check.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Brute-force mean windowed SSIM over a single plane stored row-major,
/// 11x11 Gaussian (sigma 1.5), K1=0.01, K2=0.03, L=1, valid windows only.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let n = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0; n * n];
    let c = (n as f64 - 1.0) / 2.0;
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - c, j as f64 - c);
            win[i * n + j] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = win.iter().sum();
    for v in &mut win {
        *v /= norm;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - n {
        for ox in 0..=w - n {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let g = win[i * n + j];
                    let x = a[(oy + i) * w + ox + j];
                    let y = b[(oy + i) * w + ox + j];
                    mx += g * x;
                    my += g * y;
                    mxx += g * x * x;
                    myy += g * y * y;
                    mxy += g * x * y;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * (mxy - mx * my) + c2))
                / ((mx * mx + my * my + c1) * ((mxx - mx * mx) + (myy - my * my) + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Luminance plane of a `[3, H, W]` array under BT.601 weights.
pub fn luminance(chw: &ArrayD<f64>, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(
                0.299 * chw[IxDyn(&[0, i, j])]
                    + 0.587 * chw[IxDyn(&[1, i, j])]
                    + 0.114 * chw[IxDyn(&[2, i, j])],
            );
        }
    }
    out
}

pub fn rand_chw(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |_| rng.gen_range(0.03..0.97))
}

/// Relative-error check of a scalar function's gradient at sampled
/// coordinates of `x0` against central finite differences.
///
/// `analytic` receives `x0` and returns the full gradient array;
/// `f` evaluates the scalar at a perturbed input.
pub fn check_grad_against_fd(
    x0: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    f: impl Fn(&ArrayD<f64>) -> f64,
    probes: usize,
    eps: f64,
    tol: f64,
    label: &str,
) {
    assert_eq!(analytic.shape(), x0.shape(), "{label}: gradient shape");
    let mut rng = ChaCha20Rng::seed_from_u64(0xfd);
    for _ in 0..probes {
        let flat = rng.gen_range(0..x0.len());
        let ix = unflatten(flat, x0.shape());
        let mut hi = x0.clone();
        hi[IxDyn(&ix)] += eps;
        let mut lo = x0.clone();
        lo[IxDyn(&ix)] -= eps;
        let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
        let an = analytic[IxDyn(&ix)];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            ((fd - an) / denom).abs() <= tol,
            "{label}: fd {fd} vs analytic {an} at {ix:?}"
        );
    }
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut ix = vec![0; shape.len()];
    for (d, s) in shape.iter().enumerate().rev() {
        ix[d] = flat % s;
        flat /= s;
    }
    ix
}
