//! Adversarial training loop: alternating critic/generator Adam updates
//! with a linear-decay learning-rate schedule, resumable checkpoints and an
//! append-only loss log.
//!
//! Every random draw (shuffle order, crops, interpolation epsilons) is a
//! stateless function of the root seed and the step counter, so resuming
//! from a checkpoint replays exactly the run that would have happened
//! without the interruption.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{DehazeError, Result};
use crate::haze::{DatasetManifest, Split};
use crate::image::Image;
use crate::loss::{
    adversarial_losses, mad_loss, mse_loss, perceptual_loss, route_and_combine, routing,
    ssim_loss, FeatureExtractor, LossBundle, LossComponents, LossWeights, Target,
};
use crate::model::{
    critic_forward, generator_forward, init_critic_params, init_generator_params, ModelConfig,
    Owner, ParameterSet,
};
use crate::seeds::subseed;
use crate::store::Container;
use crate::tensor::grad;
use crate::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Square crop fed to the networks; source images must be at least this big.
    pub image_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 600_000,
            batch_size: 1,
            critic_steps: 1,
            learning_rate: 2e-4,
            beta1: 0.6,
            beta2: 0.999,
            adam_eps: 1e-8,
            image_size: 256,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(DehazeError::config("total_steps must be positive"));
        }
        if self.batch_size == 0 || self.critic_steps == 0 {
            return Err(DehazeError::config(
                "batch_size and critic_steps must be positive",
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DehazeError::config("learning_rate must be positive"));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(DehazeError::config("image_size must be a positive multiple of 8"));
        }
        if self.checkpoint_every == 0 {
            return Err(DehazeError::config("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// Constant for the first half of training, then linear to 0 at `total`.
pub fn lr_schedule(base: f64, step: usize, total: usize) -> f64 {
    let half = total as f64 / 2.0;
    let s = step as f64;
    if s <= half {
        base
    } else {
        (base * (total as f64 - s) / (total as f64 - half)).max(0.0)
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<ArrayD<Real>>,
    v: Vec<ArrayD<Real>>,
}

impl AdamState {
    pub fn new(set: &ParameterSet<Real>) -> Self {
        let zeros: Vec<ArrayD<Real>> = set
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(
        &mut self,
        set: &mut ParameterSet<Real>,
        grads: &[ArrayD<Real>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        assert_eq!(grads.len(), set.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in set
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip(&mut p.value, g, m, v, |p, g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

fn azip(
    p: &mut ArrayD<Real>,
    g: &ArrayD<Real>,
    m: &mut ArrayD<Real>,
    v: &mut ArrayD<Real>,
    mut f: impl FnMut(&mut Real, Real, &mut Real, &mut Real),
) {
    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        f(p, g, m, v);
    }
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub gen: ParameterSet<Real>,
    pub critic: ParameterSet<Real>,
    pub adam_gen: AdamState,
    pub adam_critic: AdamState,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn init(model: ModelConfig, seed: u64) -> Self {
        let gen = init_generator_params(&model, subseed(seed, "init-generator", 0));
        let critic = init_critic_params(&model, subseed(seed, "init-critic", 0));
        let adam_gen = AdamState::new(&gen);
        let adam_critic = AdamState::new(&critic);
        TrainState {
            model,
            gen,
            critic,
            adam_gen,
            adam_critic,
            step: 0,
            seed,
        }
    }
}

fn finite(step: usize, term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DehazeError::NonFiniteLoss {
            step: step as u64,
            term: term.into(),
            value,
        })
    }
}

fn batch_mean(terms: Vec<Var>) -> Var {
    let n = terms.len();
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t);
    }
    acc.mul_scalar(1.0 / n as f64)
}

/// One optimization step: `critic_steps` critic updates on the penalized
/// Wasserstein term, then one generator update on the combined loss,
/// both at the scheduled learning rate. `batch` holds `(hazy, clear)` pairs
/// in `[3, H, W]` layout.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(ArrayD<Real>, ArrayD<Real>)],
    tcfg: &TrainConfig,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(DehazeError::invalid("empty batch"));
    }
    let step = state.step;
    let lr = lr_schedule(tcfg.learning_rate, step, tcfg.total_steps);

    // Generator forward once; the critic phase reuses the values as
    // constants, the generator phase differentiates through the graph.
    let gen_tape = Tape::new();
    let gen_vars = state.gen.bind(&gen_tape);
    let mut outs = Vec::with_capacity(batch.len());
    for (hazy, _) in batch {
        let x = gen_tape.leaf(hazy.clone());
        outs.push(generator_forward(&x, &gen_vars, &state.model)?);
    }
    let adv_is_fine = routing(weights.plan)[0].1 == Target::Fine;
    let adv_outs: Vec<Var> = outs
        .iter()
        .map(|o| if adv_is_fine { o.fine.clone() } else { o.coarse.clone() })
        .collect();
    let pix_outs: Vec<Var> = outs
        .iter()
        .map(|o| if adv_is_fine { o.coarse.clone() } else { o.fine.clone() })
        .collect();

    // ---- critic phase ----
    let mut adv_critic = 0.0;
    let mut gp = 0.0;
    for k in 0..tcfg.critic_steps {
        let tape = Tape::new();
        let cv = state.critic.bind(&tape);
        let fake: Vec<Var> = adv_outs
            .iter()
            .map(|v| tape.leaf(v.val().as_ref().clone()))
            .collect();
        let real: Vec<Var> = batch
            .iter()
            .map(|(_, clear)| tape.leaf(clear.clone()))
            .collect();
        let eps_seed = subseed(
            state.seed,
            "gp-eps",
            (step * tcfg.critic_steps + k) as u64,
        );
        let terms = adversarial_losses(
            &fake,
            &real,
            |x| critic_forward(x, &cv, &state.model),
            weights.lambda_gp,
            eps_seed,
        )?;
        adv_critic = finite(step, "adv_critic", terms.critic.item())?;
        gp = finite(step, "gradient_penalty", terms.penalty.item())?;
        let wrt = cv.all();
        let gvars = grad(&terms.critic, &wrt);
        let garr: Vec<ArrayD<Real>> = gvars.iter().map(|g| g.val().as_ref().clone()).collect();
        state.adam_critic.apply(&mut state.critic, &garr, lr, tcfg);
        tape.clear();
    }

    // ---- generator phase, against the freshly updated critic ----
    let cv = state.critic.bind(&gen_tape);
    let targets: Vec<Var> = batch
        .iter()
        .map(|(_, clear)| gen_tape.leaf(clear.clone()))
        .collect();
    let mut mse_t = Vec::new();
    let mut ssim_t = Vec::new();
    let mut mad_t = Vec::new();
    let mut perc_t = Vec::new();
    let mut adv_t = Vec::new();
    for i in 0..batch.len() {
        mse_t.push(mse_loss(&pix_outs[i], &targets[i])?);
        ssim_t.push(ssim_loss(&pix_outs[i], &targets[i])?);
        mad_t.push(mad_loss(&adv_outs[i], &targets[i])?);
        perc_t.push(perceptual_loss(&adv_outs[i], &targets[i], extractor)?);
        adv_t.push(critic_forward(&adv_outs[i], &cv, &state.model)?.neg());
    }
    let mse = batch_mean(mse_t);
    let ssim = batch_mean(ssim_t);
    let mad = batch_mean(mad_t);
    let perc = batch_mean(perc_t);
    let adv_gen = batch_mean(adv_t);
    let total = weights.combine_vars(&adv_gen, &mse, &ssim, &mad, &perc);

    let comps = LossComponents {
        adv_generator: finite(step, "adv_generator", adv_gen.item())?,
        adv_critic,
        gp,
        mse: finite(step, "mse", mse.item())?,
        ssim_loss: finite(step, "ssim_loss", ssim.item())?,
        mad: finite(step, "mad", mad.item())?,
        perceptual: finite(step, "perceptual", perc.item())?,
    };
    finite(step, "total_generator", total.item())?;

    let wrt = gen_vars.all();
    let gvars = grad(&total, &wrt);
    let garr: Vec<ArrayD<Real>> = gvars.iter().map(|g| g.val().as_ref().clone()).collect();
    state.adam_gen.apply(&mut state.gen, &garr, lr, tcfg);
    gen_tape.clear();

    state.step += 1;
    route_and_combine(&comps, weights)
}

const CHECKPOINT_KIND: &str = "checkpoint";

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut c = Container::default();
    c.meta.insert("kind".into(), CHECKPOINT_KIND.into());
    c.meta.insert("step".into(), state.step.to_string());
    c.meta.insert("seed".into(), state.seed.to_string());
    c.meta
        .insert("adam_gen_t".into(), state.adam_gen.t.to_string());
    c.meta
        .insert("adam_critic_t".into(), state.adam_critic.t.to_string());
    c.meta
        .insert("width_mult".into(), state.model.width_mult.to_string());
    c.meta
        .insert("deep_blocks".into(), state.model.deep_blocks.to_string());
    c.meta.insert(
        "cascade_blocks".into(),
        state.model.cascade_blocks.to_string(),
    );
    c.meta
        .insert("critic_layers".into(), state.model.critic_layers.to_string());

    let dump = |c: &mut Container, prefix: &str, set: &ParameterSet<Real>, adam: &AdamState| {
        for (i, p) in set.iter().enumerate() {
            let tag = p.owner.as_str().to_string();
            c.arrays
                .push((format!("{prefix}.{}", p.name), tag.clone(), p.value.clone()));
            c.arrays
                .push((format!("{prefix}.m.{}", p.name), tag.clone(), adam.m[i].clone()));
            c.arrays
                .push((format!("{prefix}.v.{}", p.name), tag, adam.v[i].clone()));
        }
    };
    dump(&mut c, "gen", &state.gen, &state.adam_gen);
    dump(&mut c, "critic", &state.critic, &state.adam_critic);
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = Container::load(path)?;
    if c.meta.get("kind").map(String::as_str) != Some(CHECKPOINT_KIND) {
        return Err(DehazeError::Checkpoint(format!(
            "{} is not a training checkpoint",
            path.display()
        )));
    }
    let meta = |key: &str| -> Result<&str> {
        c.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DehazeError::Checkpoint(format!("missing metadata `{key}`")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        meta(key)?
            .parse()
            .map_err(|_| DehazeError::Checkpoint(format!("bad metadata `{key}`")))
    };
    let model = ModelConfig {
        width_mult: meta("width_mult")?
            .parse()
            .map_err(|_| DehazeError::Checkpoint("bad metadata `width_mult`".into()))?,
        deep_blocks: parse_usize("deep_blocks")?,
        cascade_blocks: parse_usize("cascade_blocks")?,
        critic_layers: parse_usize("critic_layers")?,
    };

    let restore = |prefix: &str, t: u64| -> Result<(ParameterSet<Real>, AdamState)> {
        let mut set = ParameterSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let val_prefix = format!("{prefix}.");
        let m_prefix = format!("{prefix}.m.");
        let v_prefix = format!("{prefix}.v.");
        for (name, tag, arr) in &c.arrays {
            if name.starts_with(&m_prefix) {
                m.push(arr.clone());
            } else if name.starts_with(&v_prefix) {
                v.push(arr.clone());
            } else if let Some(pname) = name.strip_prefix(&val_prefix) {
                let owner = Owner::parse(tag).ok_or_else(|| {
                    DehazeError::Checkpoint(format!("unknown owner tag `{tag}`"))
                })?;
                set.push(pname, owner, arr.clone());
            }
        }
        if set.is_empty() || m.len() != set.len() || v.len() != set.len() {
            return Err(DehazeError::Checkpoint(format!(
                "incomplete `{prefix}` parameter group"
            )));
        }
        Ok((set, AdamState { t, m, v }))
    };
    let (gen, adam_gen) = restore("gen", parse_usize("adam_gen_t")? as u64)?;
    let (critic, adam_critic) = restore("critic", parse_usize("adam_critic_t")? as u64)?;
    Ok(TrainState {
        model,
        gen,
        critic,
        adam_gen,
        adam_critic,
        step: parse_usize("step")?,
        seed: parse_usize("seed")? as u64,
    })
}

/// Train-split pairs loaded to `[3, S, S]` arrays with seeded crops.
struct Loader {
    pairs: Vec<(PathBuf, PathBuf)>,
    cache: HashMap<PathBuf, Image>,
}

impl Loader {
    fn new(manifest: &DatasetManifest) -> Result<Self> {
        let pairs: Vec<(PathBuf, PathBuf)> = manifest
            .split_records(Split::Train)
            .map(|r| (r.hazy_path.clone(), r.clear_path.clone()))
            .collect();
        if pairs.is_empty() {
            return Err(DehazeError::invalid("manifest has no training records"));
        }
        Ok(Loader {
            pairs,
            cache: HashMap::new(),
        })
    }

    fn image(&mut self, path: &Path) -> Result<&Image> {
        if !self.cache.contains_key(path) {
            let img = Image::load(path)?;
            self.cache.insert(path.to_path_buf(), img);
        }
        Ok(&self.cache[path])
    }

    fn sample(
        &mut self,
        index: usize,
        size: usize,
        crop_seed: u64,
    ) -> Result<(ArrayD<Real>, ArrayD<Real>)> {
        let (hazy_path, clear_path) = self.pairs[index].clone();
        let hazy = self.image(&hazy_path)?.clone();
        let clear = self.image(&clear_path)?.clone();
        if hazy.height() != clear.height() || hazy.width() != clear.width() {
            return Err(DehazeError::invalid("hazy/clear size mismatch"));
        }
        // same window on both sides of the pair
        let (oy, ox) = crate::image::crop_offsets(hazy.height(), hazy.width(), size, crop_seed)?;
        Ok((
            hazy.crop_at(oy, ox, size)?.to_chw(),
            clear.crop_at(oy, ox, size)?.to_chw(),
        ))
    }

    fn len(&self) -> usize {
        self.pairs.len()
    }
}

fn shuffled_order(n: usize, seed: u64, pass: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(subseed(seed, "shuffle", pass));
    order.shuffle(&mut rng);
    order
}

/// Full training run from the state's current step to `total_steps`.
/// Writes `checkpoint_step<N>.bin` every `checkpoint_every` steps, a final
/// `checkpoint.bin`, and appends one line per step to `loss_log.txt`.
/// Returns the final checkpoint path.
pub fn train(
    state: &mut TrainState,
    manifest: &DatasetManifest,
    tcfg: &TrainConfig,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
    out_dir: &Path,
    on_step: &mut dyn FnMut(usize, &LossBundle),
) -> Result<PathBuf> {
    tcfg.validate()?;
    weights.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| DehazeError::io(out_dir.display().to_string(), e))?;
    let mut loader = Loader::new(manifest)?;
    let n = loader.len();
    let log_path = out_dir.join("loss_log.txt");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| DehazeError::io(log_path.display().to_string(), e))?;

    while state.step < tcfg.total_steps {
        let step = state.step;
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for b in 0..tcfg.batch_size {
            let sample_idx = step * tcfg.batch_size + b;
            let pass = (sample_idx / n) as u64;
            let order = shuffled_order(n, tcfg.seed, pass);
            let index = order[sample_idx % n];
            let crop_seed = subseed(tcfg.seed, "crop", sample_idx as u64);
            batch.push(loader.sample(index, tcfg.image_size, crop_seed)?);
        }
        let bundle = train_step(state, &batch, tcfg, weights, extractor)?;
        writeln!(
            log,
            "step {} lr {} total_gen {} total_critic {} mse {} ssim_loss {} mad {} perceptual {} adv_gen {} gp {}",
            step,
            lr_schedule(tcfg.learning_rate, step, tcfg.total_steps),
            bundle.total_generator,
            bundle.total_critic,
            bundle.mse,
            bundle.ssim_loss,
            bundle.mad,
            bundle.perceptual,
            bundle.adv_generator,
            bundle.gp
        )
        .map_err(|e| DehazeError::io(log_path.display().to_string(), e))?;
        on_step(step, &bundle);
        if state.step % tcfg.checkpoint_every == 0 || state.step == tcfg.total_steps {
            save_checkpoint(state, &out_dir.join(format!("checkpoint_step{}.bin", state.step)))?;
        }
    }
    let final_path = out_dir.join("checkpoint.bin");
    save_checkpoint(state, &final_path)?;
    Ok(final_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{build_dataset, write_procedural_sources, SynthesisConfig};
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn lr_schedule_closed_forms() {
        assert_eq!(lr_schedule(2e-4, 0, 1000), 2e-4);
        assert_eq!(lr_schedule(2e-4, 500, 1000), 2e-4);
        assert!((lr_schedule(2e-4, 750, 1000) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(2e-4, 1000, 1000), 0.0);
    }

    #[test]
    fn adam_matches_hand_trace() {
        // single scalar parameter, constant gradient 1.0, three steps
        let mut set = ParameterSet::new();
        set.push("p", Owner::Encoder, ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let mut adam = AdamState::new(&set);
        let cfg = TrainConfig {
            beta1: 0.6,
            beta2: 0.999,
            adam_eps: 1e-8,
            ..TrainConfig::default()
        };
        let g = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let lr = 0.1;

        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=3u32 {
            adam.apply(&mut set, std::slice::from_ref(&g), lr, &cfg);
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            p -= lr * (m / (1.0 - b1.powi(t as i32)))
                / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
            let got = set.get("p").unwrap().value[IxDyn(&[0])];
            assert!((got - p).abs() < 1e-9, "step {t}: {got} vs {p}");
        }
    }

    fn desk_batch(seed: u64) -> Vec<(ArrayD<Real>, ArrayD<Real>)> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut img = || {
            ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| rng.gen_range(0.1..0.9))
        };
        vec![(img(), img())]
    }

    fn desk_setup() -> (TrainState, TrainConfig, LossWeights, FeatureExtractor) {
        let state = TrainState::init(ModelConfig::tiny(), 11);
        let tcfg = TrainConfig {
            total_steps: 10,
            image_size: 16,
            checkpoint_every: 5,
            ..TrainConfig::default()
        };
        (state, tcfg, LossWeights::default(), FeatureExtractor::bundled())
    }

    #[test]
    fn train_step_finite_and_phase_isolated() {
        let (mut state, tcfg, weights, ex) = desk_setup();
        let batch = desk_batch(1);

        let gen_before = state.gen.clone();
        let critic_before = state.critic.clone();
        let bundle = train_step(&mut state, &batch, &tcfg, &weights, &ex).unwrap();
        for v in [
            bundle.total_generator,
            bundle.total_critic,
            bundle.mse,
            bundle.ssim_loss,
            bundle.mad,
            bundle.perceptual,
            bundle.gp,
        ] {
            assert!(v.is_finite());
        }
        assert_eq!(state.step, 1);

        // both groups were updated, and neither is a copy of the other run's group
        let changed = |a: &ParameterSet<Real>, b: &ParameterSet<Real>| {
            a.iter()
                .zip(b.iter())
                .any(|(x, y)| x.value != y.value)
        };
        assert!(changed(&state.gen, &gen_before));
        assert!(changed(&state.critic, &critic_before));
    }

    #[test]
    fn train_step_deterministic() {
        let (mut s1, tcfg, weights, ex) = desk_setup();
        let mut s2 = s1.clone();
        let batch = desk_batch(2);
        for _ in 0..3 {
            let b1 = train_step(&mut s1, &batch, &tcfg, &weights, &ex).unwrap();
            let b2 = train_step(&mut s2, &batch, &tcfg, &weights, &ex).unwrap();
            assert_eq!(b1.total_generator, b2.total_generator);
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn checkpoint_round_trip_byte_identical() {
        let (mut state, tcfg, weights, ex) = desk_setup();
        let batch = desk_batch(3);
        train_step(&mut state, &batch, &tcfg, &weights, &ex).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        assert!(load_checkpoint(&dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn train_loop_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        std::fs::create_dir_all(&src).unwrap();
        write_procedural_sources(&src, 3, 32).unwrap();
        let mut cfg = SynthesisConfig::new(src, dir.path().join("data"));
        cfg.train_count = 4;
        cfg.test_count = 1;
        cfg.crop_size = 24;
        cfg.seed = 5;
        let manifest = build_dataset(&cfg).unwrap();

        let tcfg = TrainConfig {
            total_steps: 4,
            image_size: 16,
            checkpoint_every: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let weights = LossWeights::default();
        let ex = FeatureExtractor::bundled();

        // uninterrupted run
        let mut full = TrainState::init(ModelConfig::tiny(), 9);
        let out_full = dir.path().join("full");
        train(&mut full, &manifest, &tcfg, &weights, &ex, &out_full, &mut |_, _| {}).unwrap();

        // interrupted at step 2, resumed from the checkpoint
        let mut first = TrainState::init(ModelConfig::tiny(), 9);
        let half = TrainConfig {
            total_steps: 2,
            ..tcfg
        };
        let out_half = dir.path().join("half");
        let ckpt =
            train(&mut first, &manifest, &half, &weights, &ex, &out_half, &mut |_, _| {}).unwrap();
        let mut resumed = load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.step, 2);
        train(&mut resumed, &manifest, &tcfg, &weights, &ex, &out_half, &mut |_, _| {}).unwrap();

        assert_eq!(resumed, full);
        assert!(out_full.join("loss_log.txt").exists());
        assert!(out_full.join("checkpoint_step2.bin").exists());
    }
}
