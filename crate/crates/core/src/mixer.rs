//! Patch encoder/decoder built from axis-wise MLP blocks.
//!
//! Tensors here are `[batch, channels, patches, patch_len]`. Each block mixes
//! along one axis: it moves that axis last, applies a residual two-layer MLP
//! with GELU, and moves it back.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MixAxis {
    Channel,
    InterPatch,
    IntraPatch,
}

impl MixAxis {
    /// Position of the mixed axis in a `[B, C, N, P]` tensor.
    pub fn tensor_axis(self) -> usize {
        match self {
            MixAxis::Channel => 1,
            MixAxis::InterPatch => 2,
            MixAxis::IntraPatch => 3,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            MixAxis::Channel => "channel_mix",
            MixAxis::InterPatch => "inter_patch_mix",
            MixAxis::IntraPatch => "intra_patch_mix",
        }
    }

    /// Permutation moving this axis last; it is its own inverse.
    fn to_last(self) -> [usize; 4] {
        match self {
            MixAxis::Channel => [0, 3, 2, 1],
            MixAxis::InterPatch => [0, 1, 3, 2],
            MixAxis::IntraPatch => [0, 1, 2, 3],
        }
    }
}

/// Whether stochastic layers are active, and the randomness they draw from.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Names and sizes of an affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_dim,
            out_dim,
        }
    }

    /// Weights uniform in `±1/√in`, bias zero.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let w: Vec<f64> = (0..self.in_dim * self.out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let w = Tensor::new(vec![self.in_dim, self.out_dim], w).expect("finite init");
        store.insert(self.weight.clone(), w.cast());
        store.insert(self.bias.clone(), Tensor::zeros(&[self.out_dim]));
    }

    /// Zeroes weight and bias so the map outputs exactly zero.
    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for name in [&self.weight, &self.bias] {
            store
                .get_mut(name)?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
        Ok(())
    }

    pub fn check<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        let w = store.get(&self.weight)?;
        if w.shape() != [self.in_dim, self.out_dim] {
            return Err(Error::shape(
                "linear weight",
                w.shape(),
                &[self.in_dim, self.out_dim],
            ));
        }
        let b = store.get(&self.bias)?;
        if b.shape() != [self.out_dim] {
            return Err(Error::shape("linear bias", b.shape(), &[self.out_dim]));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &Bindings, x: Var) -> Result<Var> {
        let last = g.shape(x).last().copied().unwrap_or(0);
        if last != self.in_dim {
            return Err(Error::shape("linear", g.shape(x), &[self.in_dim, self.out_dim]));
        }
        let y = g.matmul(x, bind.get(&self.weight)?)?;
        g.add(y, bind.get(&self.bias)?)
    }
}

/// Residual MLP applied along one axis: `x + DropPath(fc2(GELU(fc1(x))))`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlpBlock {
    pub axis: MixAxis,
    pub width: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(prefix: &str, axis: MixAxis, width: usize, hidden: usize) -> Self {
        let base = format!("{prefix}.{}", axis.key());
        Self {
            axis,
            width,
            hidden,
            fc1: Linear::new(&format!("{base}.fc1"), width, hidden),
            fc2: Linear::new(&format!("{base}.fc2"), hidden, width),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn linears(&self) -> [&Linear; 2] {
        [&self.fc1, &self.fc2]
    }
}

pub fn mlp_block<T: Real>(
    g: &mut Graph<T>,
    bind: &Bindings,
    x: Var,
    block: &MlpBlock,
    droppath: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[block.axis.tensor_axis()] != block.width {
        return Err(Error::shape(block.axis.key(), &shape, &[block.width]));
    }
    let order = block.axis.to_last();
    let moved = g.permute(x, &order)?;
    let h = block.fc1.forward(g, bind, moved)?;
    let h = g.gelu(h);
    let h = block.fc2.forward(g, bind, h)?;
    let h = match mode {
        Mode::Train(rng) => g.drop_path(h, droppath, true, &mut **rng)?,
        Mode::Eval => h,
    };
    let h = g.permute(h, &order)?;
    g.add(x, h)
}

/// Channel, inter-patch and intra-patch mixing, then a projection `p → d_e`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchEncoder {
    pub blocks: [MlpBlock; 3],
    pub proj: Linear,
}

/// Projection `d_e → p`, then intra-patch, inter-patch and channel mixing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchDecoder {
    pub proj: Linear,
    pub blocks: [MlpBlock; 3],
}

/// Axis lengths a layer's encoder and decoder are sized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MixerDims {
    pub channels: usize,
    pub patches: usize,
    pub patch_len: usize,
    pub embed: usize,
}

impl PatchEncoder {
    pub fn new(prefix: &str, dims: MixerDims, hidden: impl Fn(usize) -> usize) -> Self {
        let p = format!("{prefix}.encoder");
        Self {
            blocks: [
                MlpBlock::new(&p, MixAxis::Channel, dims.channels, hidden(dims.channels)),
                MlpBlock::new(&p, MixAxis::InterPatch, dims.patches, hidden(dims.patches)),
                MlpBlock::new(&p, MixAxis::IntraPatch, dims.patch_len, hidden(dims.patch_len)),
            ],
            proj: Linear::new(&format!("{p}.proj"), dims.patch_len, dims.embed),
        }
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.blocks.iter().flat_map(MlpBlock::linears).collect();
        v.push(&self.proj);
        v
    }
}

impl PatchDecoder {
    pub fn new(prefix: &str, dims: MixerDims, hidden: impl Fn(usize) -> usize) -> Self {
        let p = format!("{prefix}.decoder");
        Self {
            proj: Linear::new(&format!("{p}.proj"), dims.embed, dims.patch_len),
            blocks: [
                MlpBlock::new(&p, MixAxis::IntraPatch, dims.patch_len, hidden(dims.patch_len)),
                MlpBlock::new(&p, MixAxis::InterPatch, dims.patches, hidden(dims.patches)),
                MlpBlock::new(&p, MixAxis::Channel, dims.channels, hidden(dims.channels)),
            ],
        }
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v = vec![&self.proj];
        v.extend(self.blocks.iter().flat_map(MlpBlock::linears));
        v
    }
}

/// `[B, C, N, p] → [B, C, N, d_e]`
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    bind: &Bindings,
    x: Var,
    enc: &PatchEncoder,
    droppath: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut h = x;
    for block in &enc.blocks {
        h = mlp_block(g, bind, h, block, droppath, mode)?;
    }
    enc.proj.forward(g, bind, h)
}

/// `[B, C, N, d_e] → [B, C, N, p]`
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    bind: &Bindings,
    e: Var,
    dec: &PatchDecoder,
    droppath: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut h = dec.proj.forward(g, bind, e)?;
    for block in &dec.blocks {
        h = mlp_block(g, bind, h, block, droppath, mode)?;
    }
    Ok(h)
}
