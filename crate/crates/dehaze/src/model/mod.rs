//! Network parameters and shared layer building blocks.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Element, Tape, Var};

mod critic;
mod generator;

pub use critic::{critic_forward, gradient_penalty, gradient_penalty_with, init_critic_params};
pub use generator::{
    context_forward, encoder_forward, fusion_forward, generator_forward, init_generator_params,
    ContextOutput, EncoderOutput, GeneratorOutput,
};

/// Which sub-network a parameter belongs to. Tags partition the set; the
/// trainer and the back-propagation cut rely on this ownership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Encoder,
    Context,
    Fusion,
    Critic,
}

impl Owner {
    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Encoder => "encoder",
            Owner::Context => "context",
            Owner::Fusion => "fusion",
            Owner::Critic => "critic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "encoder" => Some(Owner::Encoder),
            "context" => Some(Owner::Context),
            "fusion" => Some(Owner::Fusion),
            "critic" => Some(Owner::Critic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<El: Element> {
    pub name: String,
    pub owner: Owner,
    pub value: ArrayD<El>,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<El: Element> {
    params: Vec<Param<El>>,
}

impl<El: Element> ParameterSet<El> {
    pub fn new() -> Self {
        ParameterSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, owner: Owner, value: ArrayD<El>) {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter `{name}`"
        );
        self.params.push(Param { name, owner, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<El>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<El>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<El>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter to a tape as a leaf; forward passes look them
    /// up by name, gradient sweeps address them by owner.
    pub fn bind(&self, tape: &Tape<El>) -> ParamVars<El> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut by_name = HashMap::new();
        for (i, p) in self.params.iter().enumerate() {
            let v = tape.leaf(p.value.clone());
            by_name.insert(p.name.clone(), i);
            vars.push((p.owner, v));
        }
        ParamVars { vars, by_name }
    }
}

/// Tape-bound view of a [`ParameterSet`].
pub struct ParamVars<El: Element> {
    vars: Vec<(Owner, Var<El>)>,
    by_name: HashMap<String, usize>,
}

impl<El: Element> ParamVars<El> {
    pub fn get(&self, name: &str) -> &Var<El> {
        let idx = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.vars[idx].1
    }

    pub fn owned_by(&self, owner: Owner) -> Vec<&Var<El>> {
        self.vars
            .iter()
            .filter(|(o, _)| *o == owner)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn all(&self) -> Vec<&Var<El>> {
        self.vars.iter().map(|(_, v)| v).collect()
    }

    /// Vars in parameter-set order, for writing gradients back by index.
    pub fn indexed(&self) -> &[(Owner, Var<El>)] {
        &self.vars
    }
}

/// Architecture scaling knobs. `width_mult` scales every channel count so
/// desk tests can run tiny instances of the same topology.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub width_mult: f64,
    pub deep_blocks: usize,
    pub cascade_blocks: usize,
    pub critic_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_mult: 1.0,
            deep_blocks: 3,
            cascade_blocks: 3,
            critic_layers: 4,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            width_mult: 0.125,
            critic_layers: 2,
            ..Default::default()
        }
    }

    /// Scaled channel count, never below 1.
    pub fn ch(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }
}

pub(crate) struct ParamInit<El: Element> {
    rng: ChaCha20Rng,
    normal: Normal<f64>,
    pub set: ParameterSet<El>,
}

impl<El: Element> ParamInit<El> {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha20Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).unwrap(),
            set: ParameterSet::new(),
        }
    }

    /// Conv layer: weight N(0, 0.02), zero bias, optional per-channel norm
    /// affine (gamma 1, beta 0).
    pub fn conv(
        &mut self,
        name: &str,
        owner: Owner,
        cin: usize,
        cout: usize,
        k: usize,
        norm: bool,
    ) {
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| {
            El::of(self.normal.sample(&mut self.rng))
        });
        self.set.push(format!("{name}.w"), owner, w);
        self.set
            .push(format!("{name}.b"), owner, ArrayD::zeros(IxDyn(&[cout])));
        if norm {
            self.set.push(
                format!("{name}.g"),
                owner,
                ArrayD::from_elem(IxDyn(&[cout]), El::one()),
            );
            self.set
                .push(format!("{name}.n"), owner, ArrayD::zeros(IxDyn(&[cout])));
        }
    }
}

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization with learnable affine. Degenerate 1x1 maps
/// skip the normalization (zero variance) and keep only the affine.
pub(crate) fn instance_norm<El: Element>(
    x: &Var<El>,
    gamma: &Var<El>,
    beta: &Var<El>,
) -> Var<El> {
    let sh = x.shape();
    let (h, w) = (sh[1], sh[2]);
    let affine = |v: &Var<El>| v.mul(&gamma.broadcast_ch(h, w)).add(&beta.broadcast_ch(h, w));
    if h * w == 1 {
        return affine(x);
    }
    let n = (h * w) as f64;
    let mean = x.sum_ch().mul_scalar(1.0 / n);
    let centered = x.sub(&mean.broadcast_ch(h, w));
    let var = centered.square().sum_ch().mul_scalar(1.0 / n);
    let denom = var.add_scalar(NORM_EPS).sqrt();
    affine(&centered.div(&denom.broadcast_ch(h, w)))
}

/// conv + bias, then optional instance norm and leaky activation.
pub(crate) fn conv_block<El: Element>(
    p: &ParamVars<El>,
    name: &str,
    x: &Var<El>,
    stride: usize,
    pad: usize,
    norm: bool,
    act: bool,
) -> Var<El> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let y = x.conv2d(w, stride, pad, 1);
    let sh = y.shape();
    let mut y = y.add(&b.broadcast_ch(sh[1], sh[2]));
    if norm {
        y = instance_norm(&y, p.get(&format!("{name}.g")), p.get(&format!("{name}.n")));
    }
    if act {
        y = y.leaky_relu(LEAKY_SLOPE);
    }
    y
}

/// Transposed 3x3 stride-2 convolution: zero-stuffed input, asymmetric pad,
/// then an ordinary conv. Doubles the spatial size.
pub(crate) fn tconv_block<El: Element>(
    p: &ParamVars<El>,
    name: &str,
    x: &Var<El>,
    norm: bool,
) -> Var<El> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let up = x.dilate2(2).pad2d(1, 2, 1, 2);
    let y = up.conv2d(w, 1, 0, 1);
    let sh = y.shape();
    let mut y = y.add(&b.broadcast_ch(sh[1], sh[2]));
    if norm {
        y = instance_norm(&y, p.get(&format!("{name}.g")), p.get(&format!("{name}.n")));
    }
    y.leaky_relu(LEAKY_SLOPE)
}
