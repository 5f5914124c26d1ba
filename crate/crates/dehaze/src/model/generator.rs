//! The one-encoder/two-decoder generator.
//!
//! An encoder extracts shallow skip features and a deep 1/8-resolution
//! feature. The context decoder runs a fixed-resolution cascade path and a
//! bottom-up pyramid path, fuses them level by level, and emits the coarse
//! image plus one guide feature per level. The fusion decoder mirrors the
//! encoder with transposed convolutions, consuming encoder skips and the
//! gradient-stopped guides, and emits the fine image.

use crate::error::{DehazeError, Result};
use crate::tensor::{Element, Var};

use super::{conv_block, tconv_block, ModelConfig, Owner, ParamInit, ParamVars, ParameterSet};

pub struct EncoderOutput<El: Element> {
    /// Skip features at scales 0, 1, 2 (full, 1/2, 1/4 resolution).
    pub shallow: [Var<El>; 3],
    /// Deep feature at scale 3 (1/8 resolution).
    pub deep: Var<El>,
}

pub struct ContextOutput<El: Element> {
    /// Coarse restored image, same size as the input, values in [0, 1].
    pub coarse: Var<El>,
    /// Fusion products of the pyramid path at scales 2, 1, 0.
    pub guides: [Var<El>; 3],
}

pub struct GeneratorOutput<El: Element> {
    pub coarse: Var<El>,
    pub fine: Var<El>,
}

/// Deterministic generator initialization with owner-tagged parameters.
pub fn init_generator_params<El: Element>(cfg: &ModelConfig, seed: u64) -> ParameterSet<El> {
    let mut init = ParamInit::new(seed);
    let (c64, c128, c256) = (cfg.ch(64), cfg.ch(128), cfg.ch(256));

    init.conv("enc.stem", Owner::Encoder, 3, c64, 7, true);
    init.conv("enc.down1", Owner::Encoder, c64, c128, 3, true);
    init.conv("enc.down2", Owner::Encoder, c128, c256, 3, true);
    init.conv("enc.down3", Owner::Encoder, c256, c256, 3, true);
    for i in 0..cfg.deep_blocks {
        init.conv(&format!("enc.res{i}.c1"), Owner::Encoder, c256, c256, 3, true);
        init.conv(&format!("enc.res{i}.c2"), Owner::Encoder, c256, c256, 3, true);
    }

    for i in 0..cfg.cascade_blocks {
        init.conv(&format!("ctx.casc{i}"), Owner::Context, c256, c256, 3, true);
    }
    let level_ch = [cfg.ch(128), cfg.ch(64), cfg.ch(32)];
    let mut prev = c256;
    for (l, &ch) in level_ch.iter().enumerate() {
        init.conv(&format!("ctx.up{l}"), Owner::Context, prev, ch, 3, true);
        init.conv(&format!("ctx.proj{l}"), Owner::Context, c256, ch, 1, false);
        init.conv(&format!("ctx.fuse{l}"), Owner::Context, 2 * ch, ch, 3, true);
        prev = ch;
    }
    init.conv("ctx.head", Owner::Context, level_ch[2], 3, 3, false);

    let stage_ch = [c256, c128, c64];
    let skip_ch = [c256, c128, c64];
    let guide_ch = [cfg.ch(128), cfg.ch(64), cfg.ch(32)];
    let mut prev = c256;
    for i in 0..3 {
        init.conv(&format!("fus.up{i}"), Owner::Fusion, prev, stage_ch[i], 3, true);
        init.conv(
            &format!("fus.skip{i}"),
            Owner::Fusion,
            stage_ch[i] + skip_ch[i],
            stage_ch[i],
            3,
            true,
        );
        init.conv(
            &format!("fus.guide{i}"),
            Owner::Fusion,
            stage_ch[i] + guide_ch[i],
            stage_ch[i],
            3,
            true,
        );
        prev = stage_ch[i];
    }
    init.conv("fus.head", Owner::Fusion, c64, 3, 3, false);

    init.set
}

fn check_input<El: Element>(input: &Var<El>) -> Result<()> {
    let sh = input.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(DehazeError::invalid("generator input must be [3, H, W]"));
    }
    if sh[1] % 8 != 0 || sh[2] % 8 != 0 {
        return Err(DehazeError::invalid(format!(
            "input {}x{} not divisible by 8; pad before calling",
            sh[1], sh[2]
        )));
    }
    Ok(())
}

/// Shallow skips at 64/128/256 channels and the deep 1/8 feature.
pub fn encoder_forward<El: Element>(
    input: &Var<El>,
    params: &ParamVars<El>,
    cfg: &ModelConfig,
) -> Result<EncoderOutput<El>> {
    check_input(input)?;
    let s0 = conv_block(params, "enc.stem", input, 1, 3, true, true);
    let s1 = conv_block(params, "enc.down1", &s0, 2, 1, true, true);
    let s2 = conv_block(params, "enc.down2", &s1, 2, 1, true, true);
    let mut deep = conv_block(params, "enc.down3", &s2, 2, 1, true, true);
    for i in 0..cfg.deep_blocks {
        let r = conv_block(params, &format!("enc.res{i}.c1"), &deep, 1, 1, true, true);
        let r = conv_block(params, &format!("enc.res{i}.c2"), &r, 1, 1, true, false);
        deep = deep.add(&r);
    }
    Ok(EncoderOutput {
        shallow: [s0, s1, s2],
        deep,
    })
}

/// Two-path context decoder: a size-preserving cascade and a bottom-up
/// pyramid, fused hierarchically. The deepest cascade stage feeds the
/// first (coarsest) pyramid level.
pub fn context_forward<El: Element>(
    deep: &Var<El>,
    params: &ParamVars<El>,
    cfg: &ModelConfig,
) -> ContextOutput<El> {
    let mut cascade = Vec::with_capacity(cfg.cascade_blocks);
    let mut c = deep.clone();
    for i in 0..cfg.cascade_blocks {
        c = conv_block(params, &format!("ctx.casc{i}"), &c, 1, 1, true, true);
        cascade.push(c.clone());
    }

    let mut guides = Vec::with_capacity(3);
    let mut prev = deep.clone();
    for l in 0..3 {
        let up = prev.upsample2();
        let up = conv_block(params, &format!("ctx.up{l}"), &up, 1, 1, true, true);
        let stage = &cascade[cfg.cascade_blocks - 1 - (l % cfg.cascade_blocks)];
        let proj = conv_block(params, &format!("ctx.proj{l}"), stage, 1, 0, false, true);
        let proj = proj.upsample_pow2(l + 1);
        let cat = up.tape().concat_ch(&[&up, &proj]);
        let fused = conv_block(params, &format!("ctx.fuse{l}"), &cat, 1, 1, true, true);
        guides.push(fused.clone());
        prev = fused;
    }

    let coarse = conv_block(params, "ctx.head", &prev, 1, 1, false, false).sigmoid();
    let [g0, g1, g2] = <[Var<El>; 3]>::try_from(guides).ok().unwrap();
    ContextOutput {
        coarse,
        guides: [g0, g1, g2],
    }
}

/// Fine decoder. Guides pass through a differentiation barrier: their
/// values flow forward, but no gradient reaches context-owned parameters
/// through this path.
pub fn fusion_forward<El: Element>(
    enc: &EncoderOutput<El>,
    guides: &[Var<El>; 3],
    params: &ParamVars<El>,
) -> Result<Var<El>> {
    let mut prev = enc.deep.clone();
    for i in 0..3 {
        let up = tconv_block(params, &format!("fus.up{i}"), &prev, true);
        let skip = &enc.shallow[2 - i];
        if up.shape()[1] != skip.shape()[1] {
            return Err(DehazeError::invalid("fusion stage/skip scale mismatch"));
        }
        let cat = up.tape().concat_ch(&[&up, skip]);
        let rect = conv_block(params, &format!("fus.skip{i}"), &cat, 1, 1, true, true);
        let guide = guides[i].detach();
        if guide.shape()[1] != rect.shape()[1] {
            return Err(DehazeError::invalid("fusion stage/guide scale mismatch"));
        }
        let cat = rect.tape().concat_ch(&[&rect, &guide]);
        prev = conv_block(params, &format!("fus.guide{i}"), &cat, 1, 1, true, true);
    }
    Ok(conv_block(params, "fus.head", &prev, 1, 1, false, false).sigmoid())
}

/// Full generator: encoder, context decoder, fusion decoder.
pub fn generator_forward<El: Element>(
    input: &Var<El>,
    params: &ParamVars<El>,
    cfg: &ModelConfig,
) -> Result<GeneratorOutput<El>> {
    let enc = encoder_forward(input, params, cfg)?;
    let ctx = context_forward(&enc.deep, params, cfg);
    let fine = fusion_forward(&enc, &ctx.guides, params)?;
    Ok(GeneratorOutput {
        coarse: ctx.coarse,
        fine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, Tape};
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_input(h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encoder_shapes_at_full_width() {
        let cfg = ModelConfig::default();
        let set = init_generator_params::<f64>(&cfg, 1);
        let tape = Tape::new();
        let p = set.bind(&tape);
        let x = tape.leaf(rand_input(64, 64, 2));
        let enc = encoder_forward(&x, &p, &cfg).unwrap();
        assert_eq!(enc.shallow[0].shape(), vec![64, 64, 64]);
        assert_eq!(enc.shallow[1].shape(), vec![128, 32, 32]);
        assert_eq!(enc.shallow[2].shape(), vec![256, 16, 16]);
        assert_eq!(enc.deep.shape(), vec![256, 8, 8]);
    }

    #[test]
    fn encoder_rejects_non_divisible() {
        let cfg = ModelConfig::tiny();
        let set = init_generator_params::<f64>(&cfg, 1);
        let tape = Tape::new();
        let p = set.bind(&tape);
        let x = tape.leaf(rand_input(65, 65, 3));
        assert!(encoder_forward(&x, &p, &cfg).is_err());
    }

    #[test]
    fn generator_preserves_size_and_range() {
        let cfg = ModelConfig::tiny();
        let set = init_generator_params::<f64>(&cfg, 4);
        for size in [16usize, 32] {
            let tape = Tape::new();
            let p = set.bind(&tape);
            let x = tape.leaf(rand_input(size, size, size as u64));
            let out = generator_forward(&x, &p, &cfg).unwrap();
            assert_eq!(out.coarse.shape(), vec![3, size, size]);
            assert_eq!(out.fine.shape(), vec![3, size, size]);
            for v in out.coarse.val().iter().chain(out.fine.val().iter()) {
                assert!(v.is_finite() && *v >= 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let set = init_generator_params::<f64>(&cfg, 5);
        let x0 = rand_input(16, 16, 9);
        let run = || {
            let tape = Tape::new();
            let p = set.bind(&tape);
            let x = tape.leaf(x0.clone());
            let out = generator_forward(&x, &p, &cfg).unwrap();
            (out.coarse.val().as_ref().clone(), out.fine.val().as_ref().clone())
        };
        let (c1, f1) = run();
        let (c2, f2) = run();
        assert_eq!(c1, c2);
        assert_eq!(f1, f2);
    }

    #[test]
    fn init_is_deterministic_and_partitioned() {
        let cfg = ModelConfig::tiny();
        let a = init_generator_params::<f64>(&cfg, 7);
        let b = init_generator_params::<f64>(&cfg, 7);
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.owner, pb.owner);
            assert_eq!(pa.value, pb.value);
        }
        for p in a.iter() {
            assert!(matches!(
                p.owner,
                Owner::Encoder | Owner::Context | Owner::Fusion
            ));
        }
    }

    #[test]
    fn guide_barrier_cuts_context_gradients() {
        let cfg = ModelConfig::tiny();
        let set = init_generator_params::<f64>(&cfg, 11);
        let tape = Tape::new();
        let p = set.bind(&tape);
        let x = tape.leaf(rand_input(16, 16, 12));
        let enc = encoder_forward(&x, &p, &cfg).unwrap();
        let ctx = context_forward(&enc.deep, &p, &cfg);
        let fine = fusion_forward(&enc, &ctx.guides, &p).unwrap();
        let loss = fine.square().sum_all();

        let ctx_params = p.owned_by(Owner::Context);
        let grads = grad(&loss, &ctx_params);
        for g in &grads {
            assert!(g.val().iter().all(|v| v.abs() <= 1e-12));
        }

        // encoder and fusion stay on the live path
        for owner in [Owner::Encoder, Owner::Fusion] {
            let vars = p.owned_by(owner);
            let grads = grad(&loss, &vars);
            let any_nonzero = grads
                .iter()
                .any(|g| g.val().iter().any(|v| v.abs() > 1e-8));
            assert!(any_nonzero, "no live gradient for {owner:?}");
        }
    }
}
