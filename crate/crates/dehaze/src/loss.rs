//! The five training loss terms, their weighted combination, and the
//! plan A/B routing between the coarse and fine generator outputs.
//!
//! Everything here operates on tape variables shaped `[C, H, W]` so each
//! term is differentiable end to end; scalar convenience wrappers live in
//! the trainer and evaluator.

use ndarray::{Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DehazeError, Result};
use crate::image::LUMA_WEIGHTS;
use crate::metrics::{gaussian_window, SSIM_K1, SSIM_K2, SSIM_L, SSIM_WINDOW};
use crate::model::{gradient_penalty_with, LEAKY_SLOPE};
use crate::seeds::subseed;
use crate::store::Container;
use crate::tensor::{Element, Var};

/// Loss-to-output allocation. Plan B (the default) scores the coarse map
/// with the pixel losses and lets the adversarial game shape the fine map;
/// plan A swaps the two groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Plan {
    A,
    #[default]
    B,
}

impl Plan {
    pub fn as_str(self) -> &'static str {
        match self {
            Plan::A => "A",
            Plan::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Plan::A),
            "B" | "b" => Some(Plan::B),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Adversarial,
    Mse,
    Ssim,
    Mad,
    Perceptual,
}

impl Term {
    pub fn as_str(self) -> &'static str {
        match self {
            Term::Adversarial => "adversarial",
            Term::Mse => "mse",
            Term::Ssim => "ssim",
            Term::Mad => "mad",
            Term::Perceptual => "perceptual",
        }
    }
}

/// Which generator output a term is evaluated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Coarse,
    Fine,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Coarse => "coarse",
            Target::Fine => "fine",
        }
    }
}

/// Term -> output allocation for a plan.
pub fn routing(plan: Plan) -> [(Term, Target); 5] {
    let (pix, adv) = match plan {
        Plan::B => (Target::Coarse, Target::Fine),
        Plan::A => (Target::Fine, Target::Coarse),
    };
    [
        (Term::Adversarial, adv),
        (Term::Mse, pix),
        (Term::Ssim, pix),
        (Term::Mad, adv),
        (Term::Perceptual, adv),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    pub lambda_mad: f64,
    pub lambda_perceptual: f64,
    pub lambda_gp: f64,
    pub plan: Plan,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mse: 10.0,
            lambda_ssim: 10.0,
            lambda_mad: 100.0,
            lambda_perceptual: 0.001,
            lambda_gp: 10.0,
            plan: Plan::B,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mse", self.lambda_mse),
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_mad", self.lambda_mad),
            ("lambda_perceptual", self.lambda_perceptual),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(DehazeError::config(format!(
                    "{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weighted generator total as a tape variable (the optimization target).
    pub fn combine_vars<El: Element>(
        &self,
        adv_generator: &Var<El>,
        mse: &Var<El>,
        ssim_loss: &Var<El>,
        mad: &Var<El>,
        perceptual: &Var<El>,
    ) -> Var<El> {
        adv_generator
            .add(&mse.mul_scalar(self.lambda_mse))
            .add(&ssim_loss.mul_scalar(self.lambda_ssim))
            .add(&mad.mul_scalar(self.lambda_mad))
            .add(&perceptual.mul_scalar(self.lambda_perceptual))
    }

    pub fn combine_values(
        &self,
        adv_generator: f64,
        mse: f64,
        ssim_loss: f64,
        mad: f64,
        perceptual: f64,
    ) -> f64 {
        adv_generator
            + self.lambda_mse * mse
            + self.lambda_ssim * ssim_loss
            + self.lambda_mad * mad
            + self.lambda_perceptual * perceptual
    }
}

/// Realized per-term values of one generator/critic evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub adv_generator: f64,
    pub adv_critic: f64,
    pub gp: f64,
    pub mse: f64,
    pub ssim_loss: f64,
    pub mad: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub mse: f64,
    pub ssim_loss: f64,
    pub adv_generator: f64,
    pub adv_critic: f64,
    pub gp: f64,
    pub mad: f64,
    pub perceptual: f64,
    pub total_generator: f64,
    pub total_critic: f64,
    pub routing: [(Term, Target); 5],
}

/// Weighted totals from already-routed component values.
pub fn route_and_combine(c: &LossComponents, w: &LossWeights) -> Result<LossBundle> {
    w.validate()?;
    for (name, v) in [
        ("mse", c.mse),
        ("ssim_loss", c.ssim_loss),
        ("gp", c.gp),
        ("mad", c.mad),
        ("perceptual", c.perceptual),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(DehazeError::invalid(format!(
                "loss component {name} must be non-negative and finite, got {v}"
            )));
        }
    }
    Ok(LossBundle {
        mse: c.mse,
        ssim_loss: c.ssim_loss,
        adv_generator: c.adv_generator,
        adv_critic: c.adv_critic,
        gp: c.gp,
        mad: c.mad,
        perceptual: c.perceptual,
        total_generator: w.combine_values(c.adv_generator, c.mse, c.ssim_loss, c.mad, c.perceptual),
        total_critic: c.adv_critic,
        routing: routing(w.plan),
    })
}

fn check_pair<El: Element>(pred: &Var<El>, target: &Var<El>, what: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(DehazeError::invalid(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn mse_loss<El: Element>(pred: &Var<El>, target: &Var<El>) -> Result<Var<El>> {
    check_pair(pred, target, "mse_loss")?;
    Ok(pred.sub(target).square().mean_all())
}

/// Mean absolute difference over all elements.
pub fn mad_loss<El: Element>(pred: &Var<El>, target: &Var<El>) -> Result<Var<El>> {
    check_pair(pred, target, "mad_loss")?;
    Ok(pred.sub(target).abs().mean_all())
}

fn luminance_var<El: Element>(x: &Var<El>) -> Result<Var<El>> {
    let sh = x.shape();
    match sh.first() {
        Some(1) => Ok(x.clone()),
        Some(3) => Ok(x
            .slice_ch(0, 1)
            .mul_scalar(LUMA_WEIGHTS[0])
            .add(&x.slice_ch(1, 2).mul_scalar(LUMA_WEIGHTS[1]))
            .add(&x.slice_ch(2, 3).mul_scalar(LUMA_WEIGHTS[2]))),
        _ => Err(DehazeError::invalid(
            "ssim: expected a [1|3, H, W] variable",
        )),
    }
}

/// Differentiable windowed SSIM over the luminance channel; same window,
/// constants and valid-region behaviour as `metrics::ssim`.
pub fn ssim_var<El: Element>(pred: &Var<El>, target: &Var<El>) -> Result<Var<El>> {
    check_pair(pred, target, "ssim")?;
    let sh = pred.shape();
    let (h, w) = (sh[1], sh[2]);
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(DehazeError::invalid(format!(
            "ssim: image {h}x{w} smaller than {n}x{n} window"
        )));
    }
    let tape = pred.tape();
    let win = gaussian_window();
    let kernel = tape.leaf(
        Array4::from_shape_fn((1, 1, n, n), |(_, _, i, j)| El::of(win[[i, j]])).into_dyn(),
    );
    let x = luminance_var(pred)?;
    let y = luminance_var(target)?;
    let blur = |v: &Var<El>| v.conv2d(&kernel, 1, 0, 1);

    let mx = blur(&x);
    let my = blur(&y);
    let sxx = blur(&x.square());
    let syy = blur(&y.square());
    let sxy = blur(&x.mul(&y));
    let vx = sxx.sub(&mx.square());
    let vy = syy.sub(&my.square());
    let cov = sxy.sub(&mx.mul(&my));

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let num = mx
        .mul(&my)
        .mul_scalar(2.0)
        .add_scalar(c1)
        .mul(&cov.mul_scalar(2.0).add_scalar(c2));
    let den = mx
        .square()
        .add(&my.square())
        .add_scalar(c1)
        .mul(&vx.add(&vy).add_scalar(c2));
    Ok(num.div(&den).mean_all())
}

/// `1 - SSIM(pred, target)`.
pub fn ssim_loss<El: Element>(pred: &Var<El>, target: &Var<El>) -> Result<Var<El>> {
    Ok(ssim_var(pred, target)?.neg().add_scalar(1.0))
}

const EXTRACTOR_SEED: u64 = 0x7a6e_5d4c;
const EXTRACTOR_KIND: &str = "feature-extractor";

/// Fixed convolutional feature extractor for the perceptual term: a stack
/// of 3x3 conv + leaky-relu stages, each stage one tapped feature layer.
/// The bundled instance uses fixed-seed random weights so tests and desk
/// runs are deterministic and fully offline; externally trained weights can
/// be loaded from a container file with the same layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<ExtractorLayer>,
}

#[derive(Clone, Debug, PartialEq)]
struct ExtractorLayer {
    w: ArrayD<f64>,
    b: ArrayD<f64>,
    stride: usize,
}

impl FeatureExtractor {
    /// The built-in deterministic extractor: 3->8 (stride 1), 8->16, 16->32
    /// (stride 2), He-scaled weights from a fixed seed.
    pub fn bundled() -> Self {
        let plan = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 32, 2)];
        let mut layers = Vec::new();
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let mut rng = ChaCha20Rng::seed_from_u64(subseed(
                EXTRACTOR_SEED,
                "extractor-layer",
                i as u64,
            ));
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, 3, 3]), |_| dist.sample(&mut rng));
            let b = ArrayD::zeros(IxDyn(&[cout]));
            layers.push(ExtractorLayer { w, b, stride });
        }
        FeatureExtractor { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut c = Container::default();
        c.meta.insert("kind".into(), EXTRACTOR_KIND.into());
        c.meta
            .insert("layers".into(), self.layers.len().to_string());
        for (i, l) in self.layers.iter().enumerate() {
            let tag = format!("stride={}", l.stride);
            c.arrays.push((format!("layer{i}.w"), tag.clone(), l.w.clone()));
            c.arrays.push((format!("layer{i}.b"), tag, l.b.clone()));
        }
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = Container::load(path).map_err(|e| {
            DehazeError::config(format!(
                "cannot read feature-extractor weights at {}: {e}; \
                 omit the extractor path to use the bundled fixed-seed extractor, \
                 or point it at a container written by this tool",
                path.display()
            ))
        })?;
        if c.meta.get("kind").map(String::as_str) != Some(EXTRACTOR_KIND) {
            return Err(DehazeError::config(format!(
                "{} is not a feature-extractor container; \
                 omit the extractor path to use the bundled fixed-seed extractor",
                path.display()
            )));
        }
        let n: usize = c
            .meta
            .get("layers")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DehazeError::config("extractor container missing layer count"))?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let get = |suffix: &str| {
                c.arrays
                    .iter()
                    .find(|(name, _, _)| name == &format!("layer{i}.{suffix}"))
                    .ok_or_else(|| {
                        DehazeError::config(format!("extractor container missing layer{i}.{suffix}"))
                    })
            };
            let (_, tag, w) = get("w")?;
            let (_, _, b) = get("b")?;
            let stride: usize = tag
                .strip_prefix("stride=")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DehazeError::config("extractor layer missing stride tag"))?;
            layers.push(ExtractorLayer {
                w: w.clone(),
                b: b.clone(),
                stride,
            });
        }
        Ok(FeatureExtractor { layers })
    }

    /// Tapped feature maps for a `[3, H, W]` input, one per layer.
    pub fn features<El: Element>(&self, x: &Var<El>) -> Result<Vec<Var<El>>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] != self.layers[0].w.shape()[1] {
            return Err(DehazeError::invalid(format!(
                "extractor input must be [{}, H, W], got {:?}",
                self.layers[0].w.shape()[1],
                sh
            )));
        }
        let tape = x.tape();
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.leaf(l.w.mapv(El::of));
            let b = tape.leaf(l.b.mapv(El::of));
            let y = h.conv2d(&w, l.stride, 1, 1);
            let ysh = y.shape();
            h = y
                .add(&b.broadcast_ch(ysh[1], ysh[2]))
                .leaky_relu(LEAKY_SLOPE);
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

/// Sum over layers of the per-element mean absolute feature difference.
pub fn perceptual_loss<El: Element>(
    pred: &Var<El>,
    target: &Var<El>,
    extractor: &FeatureExtractor,
) -> Result<Var<El>> {
    check_pair(pred, target, "perceptual_loss")?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(target)?;
    let mut acc: Option<Var<El>> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let term = a.sub(b).abs().mean_all();
        acc = Some(match acc {
            Some(s) => s.add(&term),
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Both sides of the adversarial game for one batch:
/// `critic_term = E[D(gen)] - E[D(J)] + lambda_gp * penalty` (what the
/// critic minimizes) and `generator_term = -E[D(gen)]`. The critic is any
/// differentiable scalar function of a `[3, H, W]` variable.
pub struct AdvTerms<El: Element> {
    pub generator: Var<El>,
    pub critic: Var<El>,
    pub penalty: Var<El>,
}

pub fn adversarial_losses<El, D>(
    fake: &[Var<El>],
    real: &[Var<El>],
    critic: D,
    lambda_gp: f64,
    eps_seed: u64,
) -> Result<AdvTerms<El>>
where
    El: Element,
    D: Fn(&Var<El>) -> Result<Var<El>>,
{
    if fake.len() != real.len() || fake.is_empty() {
        return Err(DehazeError::invalid(
            "adversarial_losses needs matched non-empty batches",
        ));
    }
    let mean_score = |batch: &[Var<El>]| -> Result<Var<El>> {
        let mut acc: Option<Var<El>> = None;
        for x in batch {
            let s = critic(x)?;
            acc = Some(match acc {
                Some(a) => a.add(&s),
                None => s,
            });
        }
        Ok(acc.unwrap().mul_scalar(1.0 / batch.len() as f64))
    };
    let d_fake = mean_score(fake)?;
    let d_real = mean_score(real)?;
    let penalty = gradient_penalty_with(real, fake, &critic, eps_seed)?;
    let critic_term = d_fake.sub(&d_real).add(&penalty.mul_scalar(lambda_gp));
    Ok(AdvTerms {
        generator: d_fake.neg(),
        critic: critic_term,
        penalty,
    })
}
