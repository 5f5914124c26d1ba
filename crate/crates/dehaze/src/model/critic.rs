//! Wasserstein critic with gradient penalty.
//!
//! Patch-style score head averaged spatially, no bounding nonlinearity and
//! no per-batch normalization anywhere (the penalty differentiates through
//! the critic's input-gradient, which batch statistics would couple).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{DehazeError, Result};
use crate::tensor::{grad, Element, Var};

use super::{ModelConfig, Owner, ParamInit, ParamVars, ParameterSet, LEAKY_SLOPE};

const CRITIC_BASE: [usize; 4] = [64, 128, 256, 512];

pub fn init_critic_params<El: Element>(cfg: &ModelConfig, seed: u64) -> ParameterSet<El> {
    let mut init = ParamInit::new(seed);
    let mut cin = 3;
    for i in 0..cfg.critic_layers {
        let cout = cfg.ch(CRITIC_BASE[i.min(CRITIC_BASE.len() - 1)]);
        init.conv(&format!("crit.down{i}"), Owner::Critic, cin, cout, 4, false);
        cin = cout;
    }
    init.conv("crit.head", Owner::Critic, cin, 1, 4, false);
    init.set
}

/// Unbounded scalar score: spatial mean of the patch-score map.
pub fn critic_forward<El: Element>(
    x: &Var<El>,
    params: &ParamVars<El>,
    cfg: &ModelConfig,
) -> Result<Var<El>> {
    let sh = x.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(DehazeError::invalid("critic input must be [3, H, W]"));
    }
    let min_side = 2usize.pow(cfg.critic_layers as u32) * 2;
    if sh[1] < min_side || sh[2] < min_side {
        return Err(DehazeError::invalid(format!(
            "critic input {}x{} too small for {} stride-2 layers",
            sh[1], sh[2], cfg.critic_layers
        )));
    }
    let mut h = x.clone();
    for i in 0..cfg.critic_layers {
        let name = format!("crit.down{i}");
        let w = params.get(&format!("{name}.w"));
        let b = params.get(&format!("{name}.b"));
        let y = h.conv2d(w, 2, 1, 1);
        let ysh = y.shape();
        h = y
            .add(&b.broadcast_ch(ysh[1], ysh[2]))
            .leaky_relu(LEAKY_SLOPE);
    }
    let w = params.get("crit.head.w");
    let b = params.get("crit.head.b");
    let y = h.conv2d(w, 1, 1, 1);
    let ysh = y.shape();
    Ok(y.add(&b.broadcast_ch(ysh[1], ysh[2])).mean_all())
}

/// Penalty term `mean((||grad_x D(x_hat)||_2 - 1)^2)` over the interpolates
/// `x_hat = eps*real + (1-eps)*fake`, one epsilon per sample, for an
/// arbitrary differentiable scalar critic. The returned value is
/// differentiable with respect to anything the critic closure captures.
pub fn gradient_penalty_with<El, D>(
    real: &[Var<El>],
    fake: &[Var<El>],
    critic: D,
    eps_seed: u64,
) -> Result<Var<El>>
where
    El: Element,
    D: Fn(&Var<El>) -> Result<Var<El>>,
{
    if real.len() != fake.len() || real.is_empty() {
        return Err(DehazeError::invalid("gradient penalty needs matched batches"));
    }
    let tape = real[0].tape().clone();
    let mut rng = ChaCha20Rng::seed_from_u64(eps_seed);
    let mut acc: Option<Var<El>> = None;
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return Err(DehazeError::invalid("real/fake shape mismatch"));
        }
        let eps: f64 = rng.gen_range(0.0..=1.0);
        // x_hat is a leaf so the inner sweep targets exactly this point.
        let mixed = ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&r.shape()),
            r.val()
                .iter()
                .zip(f.val().iter())
                .map(|(&rv, &fv)| rv * El::of(eps) + fv * El::of(1.0 - eps))
                .collect(),
        )
        .unwrap();
        let x_hat = tape.leaf(mixed);
        let score = critic(&x_hat)?;
        let gx = grad(&score, &[&x_hat]).remove(0);
        let norm = gx.square().sum_all().sqrt();
        let pen = norm.add_scalar(-1.0).square();
        acc = Some(match acc {
            Some(a) => a.add(&pen),
            None => pen,
        });
    }
    Ok(acc.unwrap().mul_scalar(1.0 / real.len() as f64))
}

/// `gradient_penalty_with` specialized to the learned critic.
pub fn gradient_penalty<El: Element>(
    real: &[Var<El>],
    fake: &[Var<El>],
    params: &ParamVars<El>,
    cfg: &ModelConfig,
    eps_seed: u64,
) -> Result<Var<El>> {
    gradient_penalty_with(real, fake, |x| critic_forward(x, params, cfg), eps_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn score_finite_and_input_sensitive() {
        let cfg = ModelConfig::tiny();
        let set = init_critic_params::<f64>(&cfg, 3);
        let tape = Tape::new();
        let p = set.bind(&tape);

        let zeros = tape.leaf(ArrayD::zeros(IxDyn(&[3, 16, 16])));
        let ones = tape.leaf(ArrayD::from_elem(IxDyn(&[3, 16, 16]), 1.0));
        let s0 = critic_forward(&zeros, &p, &cfg).unwrap().item();
        let s1 = critic_forward(&ones, &p, &cfg).unwrap().item();
        assert!(s0.is_finite() && s1.is_finite());
        assert!((s0 - s1).abs() > 1e-9, "critic constant after random init");
    }

    #[test]
    fn rejects_undersized_input() {
        let cfg = ModelConfig::default(); // 4 stride-2 layers
        let set = init_critic_params::<f64>(&cfg, 3);
        let tape = Tape::new();
        let p = set.bind(&tape);
        let x = tape.leaf(rand_img(8, 8, 1));
        assert!(critic_forward(&x, &p, &cfg).is_err());
    }

    #[test]
    fn penalty_nonnegative_and_eps_symmetric() {
        let cfg = ModelConfig::tiny();
        let set = init_critic_params::<f64>(&cfg, 5);
        let tape = Tape::new();
        let p = set.bind(&tape);
        let r = tape.leaf(rand_img(16, 16, 6));
        let f = tape.leaf(rand_img(16, 16, 7));
        let pen = gradient_penalty(
            std::slice::from_ref(&r),
            std::slice::from_ref(&f),
            &p,
            &cfg,
            99,
        )
        .unwrap();
        assert!(pen.item() >= 0.0);

        // same interpolate from the swapped pair with mirrored epsilon
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let eps: f64 = rng.gen_range(0.0..=1.0);
        let mix = |a: &ArrayD<f64>, b: &ArrayD<f64>, e: f64| {
            ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |ix| {
                a[&ix] * e + b[&ix] * (1.0 - e)
            })
        };
        let x1 = mix(&r.val(), &f.val(), eps);
        let x2 = mix(&f.val(), &r.val(), 1.0 - eps);
        assert_eq!(x1, x2);
    }
}
